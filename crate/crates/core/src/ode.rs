//! Classical fixed-step fourth-order Runge-Kutta.

/// Scratch buffers for [`Rk4::step`], sized once per system dimension.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Rk4 {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.k1.len()
    }

    /// Advances `x` by `h` in place. `f(t, x, dx)` writes the derivative.
    pub fn step<F>(&mut self, mut f: F, t: f64, x: &mut [f64], h: f64)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        debug_assert_eq!(x.len(), self.dim());
        let half = 0.5 * h;
        f(t, x, &mut self.k1);
        for (j, tmp) in self.tmp.iter_mut().enumerate() {
            *tmp = x[j] + half * self.k1[j];
        }
        f(t + half, &self.tmp, &mut self.k2);
        for (j, tmp) in self.tmp.iter_mut().enumerate() {
            *tmp = x[j] + half * self.k2[j];
        }
        f(t + half, &self.tmp, &mut self.k3);
        for (j, tmp) in self.tmp.iter_mut().enumerate() {
            *tmp = x[j] + h * self.k3[j];
        }
        f(t + h, &self.tmp, &mut self.k4);
        let sixth = h / 6.0;
        for j in 0..x.len() {
            x[j] += sixth * (self.k1[j] + 2.0 * self.k2[j] + 2.0 * self.k3[j] + self.k4[j]);
        }
    }
}

/// Number of steps of size at most `dt` covering `horizon`, tolerant to
/// round-off (`horizon = 30`, `dt = 0.1` gives exactly 300).
pub fn step_count(horizon: f64, dt: f64) -> usize {
    let n = horizon / dt;
    let rounded = n.round();
    if (n - rounded).abs() < 1e-9 * n.max(1.0) {
        rounded as usize
    } else {
        n.ceil() as usize
    }
}

/// Integrates `dx/dt = f(t, x)` from `t = 0` and returns `(t, x)` at every step.
pub fn solve<F>(mut f: F, x0: &[f64], horizon: f64, dt: f64) -> Vec<(f64, Vec<f64>)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    let n = step_count(horizon, dt);
    let mut out = Vec::with_capacity(n + 1);
    out.push((0.0, x.clone()));
    let mut t = 0.0;
    for k in 0..n {
        let h = (horizon - k as f64 * dt).min(dt);
        rk.step(&mut f, t, &mut x, h);
        t = ((k + 1) as f64 * dt).min(horizon);
        out.push((t, x.clone()));
    }
    out
}
