//! Reference implementations written with plain scalar loops, kept apart from
//! the library kernels they check.

/// Weights for one LSTM cell as nested vectors. Row `j` of each matrix feeds unit `j`.
#[derive(Clone, Debug)]
pub struct ScalarLstm {
    pub wx: [Vec<Vec<f64>>; 4], // i, f, o, c: [H][C]
    pub wh: [Vec<Vec<f64>>; 4], // i, f, o, c: [H][H]
    pub b: [Vec<f64>; 4],
    pub peep: Option<[Vec<f64>; 3]>, // i, f, o
    pub sigmoid_candidate: bool,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ScalarLstm {
    /// One step of the gate equations; returns (h_t, c_t).
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let units = self.b[0].len();
        let pre = |gate: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for (w, xv) in self.wx[gate][j].iter().zip(x) {
                s += w * xv;
            }
            for (w, hv) in self.wh[gate][j].iter().zip(h) {
                s += w * hv;
            }
            s + self.b[gate][j]
        };
        let mut h_new = vec![0.0; units];
        let mut c_new = vec![0.0; units];
        for j in 0..units {
            let mut zi = pre(0, j);
            let mut zf = pre(1, j);
            let mut zo = pre(2, j);
            let zc = pre(3, j);
            if let Some(p) = &self.peep {
                zi += p[0][j] * c[j];
                zf += p[1][j] * c[j];
            }
            let i = logistic(zi);
            let f = logistic(zf);
            let g = if self.sigmoid_candidate { logistic(zc) } else { zc.tanh() };
            c_new[j] = f * c[j] + i * g;
            if let Some(p) = &self.peep {
                zo += p[2][j] * c_new[j];
            }
            let o = logistic(zo);
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    /// Unrolled run from the zero state; returns every (h_t, c_t).
    pub fn unroll(&self, xs: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let units = self.b[0].len();
        let mut h = vec![0.0; units];
        let mut c = vec![0.0; units];
        let mut trace = Vec::new();
        for x in xs {
            let (h2, c2) = self.step(x, &h, &c);
            h = h2;
            c = c2;
            trace.push((h.clone(), c.clone()));
        }
        trace
    }
}

/// Brute-force valid convolution: x[T][C], filters[F][K][C] -> y[T-K+1][F].
pub fn conv1d(x: &[Vec<f64>], filters: &[Vec<Vec<f64>>], bias: &[f64]) -> Vec<Vec<f64>> {
    let t = x.len();
    let k = filters[0].len();
    let mut out = Vec::new();
    for start in 0..=(t - k) {
        let mut row = Vec::new();
        for (f, filt) in filters.iter().enumerate() {
            let mut s = bias[f];
            for dk in 0..k {
                for ch in 0..x[0].len() {
                    s += filt[dk][ch] * x[start + dk][ch];
                }
            }
            row.push(s);
        }
        out.push(row);
    }
    out
}

/// Enumerates window start offsets by walking the stream.
pub fn window_starts(n: usize, window: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window <= n {
        starts.push(s);
        s += step;
    }
    starts
}
