//! LSTM cells (standard and peephole) with backpropagation through time, and
//! the bidirectional wrapper.
//!
//! Gates for unit `j`, with `x` the step input and `h`, `c` the previous state:
//!
//! ```text
//! i = σ(W_xi·x + W_hi·h + b_i [+ p_i ⊙ c])
//! f = σ(W_xf·x + W_hf·h + b_f [+ p_f ⊙ c])
//! g = tanh(W_xc·x + W_hc·h + b_c)          (σ when configured)
//! c' = f ⊙ c + i ⊙ g
//! o = σ(W_xo·x + W_ho·h + b_o [+ p_o ⊙ c'])
//! h' = o ⊙ tanh(c')
//! ```
//!
//! Bracketed terms exist only for the peephole variant.

use rand::Rng;

use super::{expect_rank, glorot_uniform, Layer, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, sigmoid, transposed, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmVariant {
    Standard,
    Peephole,
}

/// Nonlinearity for the candidate `g`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidateActivation {
    #[default]
    Tanh,
    Sigmoid,
}

impl CandidateActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            CandidateActivation::Tanh => z.tanh(),
            CandidateActivation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn slope(self, g: f64) -> f64 {
        match self {
            CandidateActivation::Tanh => 1.0 - g * g,
            CandidateActivation::Sigmoid => g * (1.0 - g),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateActivation::Tanh => "tanh",
            CandidateActivation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for CandidateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(CandidateActivation::Tanh),
            "sigmoid" => Ok(CandidateActivation::Sigmoid),
            other => Err(Error::invalid(format!("unknown candidate activation '{other}'"))),
        }
    }
}

/// Diagonal peephole weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Peepholes {
    pub p_i: Tensor,
    pub p_f: Tensor,
    pub p_o: Tensor,
}

/// Input-to-gate `[H, C]`, hidden-to-gate `[H, H]`, biases `[H]`, and
/// optional peepholes `[H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub w_xi: Tensor,
    pub w_xf: Tensor,
    pub w_xo: Tensor,
    pub w_xc: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_ho: Tensor,
    pub w_hc: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
    pub peephole: Option<Peepholes>,
}

impl LstmWeights {
    pub fn zeros(inputs: usize, hidden: usize, variant: LstmVariant) -> Self {
        let wx = || Tensor::zeros(&[hidden, inputs]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let v = || Tensor::zeros(&[hidden]);
        LstmWeights {
            w_xi: wx(),
            w_xf: wx(),
            w_xo: wx(),
            w_xc: wx(),
            w_hi: wh(),
            w_hf: wh(),
            w_ho: wh(),
            w_hc: wh(),
            b_i: v(),
            b_f: v(),
            b_o: v(),
            b_c: v(),
            peephole: match variant {
                LstmVariant::Standard => None,
                LstmVariant::Peephole => Some(Peepholes {
                    p_i: v(),
                    p_f: v(),
                    p_o: v(),
                }),
            },
        }
    }

    /// Glorot-uniform weights, forget bias 1, other biases 0. Peephole vectors
    /// are drawn as the diagonal of an `[H, H]` matrix.
    pub fn random(inputs: usize, hidden: usize, variant: LstmVariant, rng: &mut impl Rng) -> Self {
        let mut w = LstmWeights::zeros(inputs, hidden, variant);
        for t in [&mut w.w_xi, &mut w.w_xf, &mut w.w_xo, &mut w.w_xc] {
            *t = glorot_uniform(rng, &[hidden, inputs], inputs, hidden);
        }
        for t in [&mut w.w_hi, &mut w.w_hf, &mut w.w_ho, &mut w.w_hc] {
            *t = glorot_uniform(rng, &[hidden, hidden], hidden, hidden);
        }
        w.b_f = Tensor::filled(&[hidden], 1.0);
        if let Some(p) = &mut w.peephole {
            for t in [&mut p.p_i, &mut p.p_f, &mut p.p_o] {
                *t = glorot_uniform(rng, &[hidden], hidden, hidden);
            }
        }
        w
    }

    pub fn hidden(&self) -> usize {
        self.b_i.len()
    }

    pub fn inputs(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn variant(&self) -> LstmVariant {
        if self.peephole.is_some() {
            LstmVariant::Peephole
        } else {
            LstmVariant::Standard
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_xi", &self.w_xi),
            ("w_xf", &self.w_xf),
            ("w_xo", &self.w_xo),
            ("w_xc", &self.w_xc),
            ("w_hi", &self.w_hi),
            ("w_hf", &self.w_hf),
            ("w_ho", &self.w_ho),
            ("w_hc", &self.w_hc),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ];
        if let Some(p) = &self.peephole {
            out.extend([("p_i", &p.p_i), ("p_f", &p.p_f), ("p_o", &p.p_o)]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("w_xi", &mut self.w_xi),
            ("w_xf", &mut self.w_xf),
            ("w_xo", &mut self.w_xo),
            ("w_xc", &mut self.w_xc),
            ("w_hi", &mut self.w_hi),
            ("w_hf", &mut self.w_hf),
            ("w_ho", &mut self.w_ho),
            ("w_hc", &mut self.w_hc),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_o", &mut self.b_o),
            ("b_c", &mut self.b_c),
        ];
        if let Some(p) = &mut self.peephole {
            out.extend([("p_i", &mut p.p_i), ("p_f", &mut p.p_f), ("p_o", &mut p.p_o)]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (h, c) = (self.hidden(), self.inputs());
        for (name, t) in self.tensors() {
            let want: &[usize] = match name.as_bytes()[0] {
                b'w' if name.as_bytes()[2] == b'x' => &[h, c],
                b'w' => &[h, h],
                _ => &[h],
            };
            if t.shape() != want {
                return Err(Error::shape("lstm weights", t.shape(), want));
            }
        }
        Ok(())
    }

    fn stacked(&self) -> Stacked {
        let mut wx = Vec::with_capacity(4 * self.w_xi.len());
        let mut wh = Vec::with_capacity(4 * self.w_hi.len());
        let mut b = Vec::with_capacity(4 * self.hidden());
        for (x, h, bias) in [
            (&self.w_xi, &self.w_hi, &self.b_i),
            (&self.w_xf, &self.w_hf, &self.b_f),
            (&self.w_xo, &self.w_ho, &self.b_o),
            (&self.w_xc, &self.w_hc, &self.b_c),
        ] {
            wx.extend_from_slice(x.data());
            wh.extend_from_slice(h.data());
            b.extend_from_slice(bias.data());
        }
        let (h, c) = (self.hidden(), self.inputs());
        Stacked {
            hidden: h,
            inputs: c,
            wx_t: transposed(4 * h, c, &wx),
            wh_t: transposed(4 * h, h, &wh),
            wx,
            wh,
            b,
            peep: self
                .peephole
                .as_ref()
                .map(|p| [p.p_i.data().to_vec(), p.p_f.data().to_vec(), p.p_o.data().to_vec()]),
        }
    }

    /// Adds stacked gradients (gate order i, f, o, c) into the named tensors.
    fn accumulate(&mut self, grads: &StackedGrads) {
        let (h, c) = (self.hidden(), self.inputs());
        let gates_x = [&mut self.w_xi, &mut self.w_xf, &mut self.w_xo, &mut self.w_xc];
        for (g, t) in gates_x.into_iter().enumerate() {
            add_into(t, &grads.wx[g * h * c..(g + 1) * h * c]);
        }
        let gates_h = [&mut self.w_hi, &mut self.w_hf, &mut self.w_ho, &mut self.w_hc];
        for (g, t) in gates_h.into_iter().enumerate() {
            add_into(t, &grads.wh[g * h * h..(g + 1) * h * h]);
        }
        let biases = [&mut self.b_i, &mut self.b_f, &mut self.b_o, &mut self.b_c];
        for (g, t) in biases.into_iter().enumerate() {
            add_into(t, &grads.b[g * h..(g + 1) * h]);
        }
        if let (Some(p), Some(dp)) = (&mut self.peephole, &grads.peep) {
            add_into(&mut p.p_i, &dp[0]);
            add_into(&mut p.p_f, &dp[1]);
            add_into(&mut p.p_o, &dp[2]);
        }
    }
}

fn add_into(t: &mut Tensor, g: &[f64]) {
    for (v, d) in t.data_mut().iter_mut().zip(g) {
        *v += d;
    }
}

/// Hidden and cell vectors `[H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

/// The four gate blocks stacked row-wise as `[4H, C]`, `[4H, H]`, `[4H]`,
/// plus the transposed weight blocks for the forward products.
struct Stacked {
    hidden: usize,
    inputs: usize,
    wx: Vec<f64>,
    wh: Vec<f64>,
    wx_t: Vec<f64>,
    wh_t: Vec<f64>,
    b: Vec<f64>,
    peep: Option<[Vec<f64>; 3]>,
}

struct StackedGrads {
    wx: Vec<f64>,
    wh: Vec<f64>,
    b: Vec<f64>,
    peep: Option<[Vec<f64>; 3]>,
}

/// Activations of one step for a batch, each `[B, H]` (x is `[B, C]`).
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl Stacked {
    fn step(&self, cand: CandidateActivation, batch: usize, x: Vec<f64>, h_prev: Vec<f64>, c_prev: Vec<f64>) -> StepCache {
        let (hd, cn) = (self.hidden, self.inputs);
        let g4 = 4 * hd;
        let mut z = Vec::with_capacity(batch * g4);
        for _ in 0..batch {
            z.extend_from_slice(&self.b);
        }
        gemm_nn(batch, cn, g4, &x, &self.wx_t, &mut z);
        gemm_nn(batch, hd, g4, &h_prev, &self.wh_t, &mut z);

        let n = batch * hd;
        let mut s = StepCache {
            x,
            h_prev,
            c_prev,
            i: vec![0.0; n],
            f: vec![0.0; n],
            o: vec![0.0; n],
            g: vec![0.0; n],
            c: vec![0.0; n],
            tanh_c: vec![0.0; n],
            h: vec![0.0; n],
        };
        for b in 0..batch {
            let zr = &z[b * g4..(b + 1) * g4];
            for j in 0..hd {
                let idx = b * hd + j;
                let [i, f, o, g, c, tc] = self.cell(cand, zr, j, s.c_prev[idx]);
                s.i[idx] = i;
                s.f[idx] = f;
                s.o[idx] = o;
                s.g[idx] = g;
                s.c[idx] = c;
                s.tanh_c[idx] = tc;
                s.h[idx] = o * tc;
            }
        }
        s
    }

    /// Gate pre-activations `zr` (one batch row, `[4H]`) to
    /// `[i, f, o, g, c, tanh(c)]` for unit `j`.
    #[inline]
    fn cell(&self, cand: CandidateActivation, zr: &[f64], j: usize, c_prev: f64) -> [f64; 6] {
        let hd = self.hidden;
        let (mut zi, mut zf, mut zo) = (zr[j], zr[hd + j], zr[2 * hd + j]);
        if let Some(p) = &self.peep {
            zi += p[0][j] * c_prev;
            zf += p[1][j] * c_prev;
        }
        let i = sigmoid(zi);
        let f = sigmoid(zf);
        let g = cand.apply(zr[3 * hd + j]);
        let c = f * c_prev + i * g;
        if let Some(p) = &self.peep {
            zo += p[2][j] * c;
        }
        [i, f, sigmoid(zo), g, c, c.tanh()]
    }

    /// Final `[B, H]` hidden state from a zero state, without caching steps.
    fn last_hidden(&self, cand: CandidateActivation, x: &Tensor) -> Vec<f64> {
        let (batch, steps, cn) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (hd, g4) = (self.hidden, 4 * self.hidden);
        let mut h = vec![0.0; batch * hd];
        let mut c = vec![0.0; batch * hd];
        let mut xt = vec![0.0; batch * cn];
        let mut z = vec![0.0; batch * g4];
        for t in 0..steps {
            for b in 0..batch {
                let row = (b * steps + t) * cn;
                xt[b * cn..(b + 1) * cn].copy_from_slice(&x.data()[row..row + cn]);
                z[b * g4..(b + 1) * g4].copy_from_slice(&self.b);
            }
            gemm_nn(batch, cn, g4, &xt, &self.wx_t, &mut z);
            gemm_nn(batch, hd, g4, &h, &self.wh_t, &mut z);
            for b in 0..batch {
                let zr = &z[b * g4..(b + 1) * g4];
                for j in 0..hd {
                    let idx = b * hd + j;
                    let [_, _, o, _, cell, tc] = self.cell(cand, zr, j, c[idx]);
                    c[idx] = cell;
                    h[idx] = o * tc;
                }
            }
        }
        h
    }

    /// Runs `[B, T, C]` from the given `[B, H]` state, keeping every step.
    fn run(&self, cand: CandidateActivation, x: &Tensor, h0: Vec<f64>, c0: Vec<f64>) -> Vec<StepCache> {
        let (batch, steps, cn) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut h = h0;
        let mut c = c0;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut xt = Vec::with_capacity(batch * cn);
            for b in 0..batch {
                let row = (b * steps + t) * cn;
                xt.extend_from_slice(&x.data()[row..row + cn]);
            }
            let s = self.step(cand, batch, xt, h, c);
            h = s.h.clone();
            c = s.c.clone();
            out.push(s);
        }
        out
    }

    /// BPTT from a gradient on the final hidden state. Returns parameter
    /// gradients and the gradient wrt the `[B, T, C]` input.
    fn backward(&self, cand: CandidateActivation, steps: &[StepCache], batch: usize, dh_final: &[f64]) -> (StackedGrads, Vec<f64>) {
        let (hd, cn) = (self.hidden, self.inputs);
        let g4 = 4 * hd;
        let t_len = steps.len();
        let mut grads = StackedGrads {
            wx: vec![0.0; g4 * cn],
            wh: vec![0.0; g4 * hd],
            b: vec![0.0; g4],
            peep: self.peep.as_ref().map(|_| [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]]),
        };
        let mut dx = vec![0.0; batch * t_len * cn];
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; batch * hd];
        let mut dz = vec![0.0; batch * g4];
        let mut dxt = vec![0.0; batch * cn];

        for (t, s) in steps.iter().enumerate().rev() {
            for b in 0..batch {
                for j in 0..hd {
                    let idx = b * hd + j;
                    let (i, f, o, g) = (s.i[idx], s.f[idx], s.o[idx], s.g[idx]);
                    let (tc, cp) = (s.tanh_c[idx], s.c_prev[idx]);
                    let dho = dh[idx];
                    let dzo = dho * tc * o * (1.0 - o);
                    let mut dct = dc[idx] + dho * o * (1.0 - tc * tc);
                    if let (Some(p), Some(dp)) = (&self.peep, &mut grads.peep) {
                        dct += dzo * p[2][j];
                        dp[2][j] += dzo * s.c[idx];
                    }
                    let dzf = dct * cp * f * (1.0 - f);
                    let dzi = dct * g * i * (1.0 - i);
                    let dzg = dct * i * cand.slope(g);
                    let mut dcp = dct * f;
                    if let (Some(p), Some(dp)) = (&self.peep, &mut grads.peep) {
                        dcp += dzi * p[0][j] + dzf * p[1][j];
                        dp[0][j] += dzi * cp;
                        dp[1][j] += dzf * cp;
                    }
                    dc[idx] = dcp;
                    let row = b * g4;
                    dz[row + j] = dzi;
                    dz[row + hd + j] = dzf;
                    dz[row + 2 * hd + j] = dzo;
                    dz[row + 3 * hd + j] = dzg;
                }
            }
            gemm_tn(g4, batch, cn, &dz, &s.x, &mut grads.wx);
            gemm_tn(g4, batch, hd, &dz, &s.h_prev, &mut grads.wh);
            for row in dz.chunks_exact(g4) {
                for (d, v) in grads.b.iter_mut().zip(row) {
                    *d += v;
                }
            }
            dh.fill(0.0);
            gemm_nn(batch, g4, hd, &dz, &self.wh, &mut dh);
            dxt.fill(0.0);
            gemm_nn(batch, g4, cn, &dz, &self.wx, &mut dxt);
            for b in 0..batch {
                let dst = (b * t_len + t) * cn;
                dx[dst..dst + cn].copy_from_slice(&dxt[b * cn..(b + 1) * cn]);
            }
        }
        (grads, dx)
    }
}

fn check_sequence(x: &Tensor, w: &LstmWeights) -> Result<()> {
    expect_rank("lstm input", x, 3)?;
    if x.shape()[2] != w.inputs() {
        return Err(Error::shape(
            "lstm input",
            x.shape(),
            &[x.shape()[0], x.shape()[1], w.inputs()],
        ));
    }
    Ok(())
}

fn check_state(state: &LstmState, hidden: usize) -> Result<()> {
    if state.h.shape() != [hidden] || state.c.shape() != [hidden] {
        return Err(Error::shape("lstm state", state.h.shape(), &[hidden]));
    }
    if !state.h.is_finite() || !state.c.is_finite() {
        return Err(Error::NonFinite("lstm state".into()));
    }
    Ok(())
}

/// One step for a single input vector `[C]`. The variant follows from whether
/// `w` carries peepholes.
pub fn lstm_step(x: &Tensor, state: &LstmState, w: &LstmWeights, cand: CandidateActivation) -> Result<LstmState> {
    w.validate()?;
    if x.shape() != [w.inputs()] {
        return Err(Error::shape("lstm_step input", x.shape(), &[w.inputs()]));
    }
    check_state(state, w.hidden())?;
    let s = w
        .stacked()
        .step(cand, 1, x.data().to_vec(), state.h.data().to_vec(), state.c.data().to_vec());
    Ok(LstmState {
        h: Tensor::vector(s.h),
        c: Tensor::vector(s.c),
    })
}

/// Runs `X[T, C]` from `state` and returns the final state.
pub fn lstm_sequence_from(x: &Tensor, w: &LstmWeights, cand: CandidateActivation, state: &LstmState) -> Result<LstmState> {
    w.validate()?;
    expect_rank("lstm_sequence input", x, 2)?;
    check_state(state, w.hidden())?;
    let batch = x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?;
    check_sequence(&batch, w)?;
    let steps = w
        .stacked()
        .run(cand, &batch, state.h.data().to_vec(), state.c.data().to_vec());
    let last = steps.last().expect("T >= 1");
    Ok(LstmState {
        h: Tensor::vector(last.h.clone()),
        c: Tensor::vector(last.c.clone()),
    })
}

/// Final hidden state `h_T` of `X[T, C]` from the zero state.
pub fn lstm_sequence(x: &Tensor, w: &LstmWeights, cand: CandidateActivation) -> Result<Tensor> {
    Ok(lstm_sequence_from(x, w, cand, &LstmState::zeros(w.hidden()))?.h)
}

/// Forward/backward unit split for a bidirectional layer of `total` units.
pub fn split_units(total: usize) -> Result<(usize, usize)> {
    if total < 2 {
        return Err(Error::invalid(format!("bidirectional LSTM needs at least 2 units, got {total}")));
    }
    Ok((total / 2, total - total / 2))
}

/// `[h_fwd; h_bwd]` where the backward net reads `X` reversed in time.
pub fn bilstm_sequence(x: &Tensor, w_fwd: &LstmWeights, w_bwd: &LstmWeights, cand: CandidateActivation) -> Result<Tensor> {
    expect_rank("bilstm input", x, 2)?;
    let fwd = lstm_sequence(x, w_fwd, cand)?;
    let bwd = lstm_sequence(&reverse_time(&x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?)?.reshape(x.shape())?, w_bwd, cand)?;
    let mut out = fwd.into_data();
    out.extend(bwd.into_data());
    Ok(Tensor::vector(out))
}

/// Reverses the time axis of `[B, T, C]`.
fn reverse_time(x: &Tensor) -> Result<Tensor> {
    let (batch, steps, cn) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        for t in (0..steps).rev() {
            let row = (b * steps + t) * cn;
            out.extend_from_slice(&x.data()[row..row + cn]);
        }
    }
    Tensor::new(vec![batch, steps, cn], out)
}

struct SequenceCache {
    steps: Vec<StepCache>,
    stacked: Stacked,
    batch: usize,
}

/// LSTM over `[B, T, C]` emitting the final hidden state `[B, H]`.
pub struct Lstm {
    weights: LstmWeights,
    grads: LstmWeights,
    candidate: CandidateActivation,
    cache: Option<SequenceCache>,
}

impl Lstm {
    pub fn new(inputs: usize, hidden: usize, variant: LstmVariant, candidate: CandidateActivation, rng: &mut impl Rng) -> Self {
        Self::from_weights(LstmWeights::random(inputs, hidden, variant, rng), candidate).expect("consistent shapes")
    }

    pub fn from_weights(weights: LstmWeights, candidate: CandidateActivation) -> Result<Self> {
        weights.validate()?;
        Ok(Lstm {
            grads: LstmWeights::zeros(weights.inputs(), weights.hidden(), weights.variant()),
            weights,
            candidate,
            cache: None,
        })
    }

    pub fn weights(&self) -> &LstmWeights {
        &self.weights
    }

    pub fn hidden(&self) -> usize {
        self.weights.hidden()
    }

    fn start(&self, x: &Tensor) -> Result<(Stacked, Vec<StepCache>)> {
        check_sequence(x, &self.weights)?;
        let batch = x.shape()[0];
        let zeros = vec![0.0; batch * self.hidden()];
        let stacked = self.weights.stacked();
        let steps = stacked.run(self.candidate, x, zeros.clone(), zeros);
        Ok((stacked, steps))
    }
}

impl Layer for Lstm {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        check_sequence(input, &self.weights)?;
        let h = self.weights.stacked().last_hidden(self.candidate, input);
        Tensor::new(vec![input.shape()[0], self.hidden()], h)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (stacked, steps) = self.start(input)?;
        let h = steps.last().expect("T >= 1").h.clone();
        self.cache = Some(SequenceCache {
            steps,
            stacked,
            batch: input.shape()[0],
        });
        Tensor::new(vec![input.shape()[0], self.hidden()], h)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache { layer: "lstm" })?;
        let want = [cache.batch, self.hidden()];
        if grad_output.shape() != want {
            return Err(Error::shape("lstm backward", grad_output.shape(), &want));
        }
        let (grads, dx) = cache
            .stacked
            .backward(self.candidate, &cache.steps, cache.batch, grad_output.data());
        self.grads.accumulate(&grads);
        Tensor::new(vec![cache.batch, cache.steps.len(), self.weights.inputs()], dx)
    }

    fn params(&self) -> Vec<ParamRef<'_>> {
        self.weights
            .tensors()
            .into_iter()
            .map(|(name, value)| ParamRef {
                name: name.into(),
                value,
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.weights
            .tensors_mut()
            .into_iter()
            .zip(self.grads.tensors_mut())
            .map(|((name, value), (_, grad))| ParamMut {
                name: name.into(),
                value,
                grad,
            })
            .collect()
    }
}

/// Two LSTMs over the sequence and its time reversal; output `[B, Hf + Hb]`.
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl BiLstm {
    pub fn new(inputs: usize, total_units: usize, variant: LstmVariant, candidate: CandidateActivation, rng: &mut impl Rng) -> Result<Self> {
        let (hf, hb) = split_units(total_units)?;
        Ok(BiLstm {
            fwd: Lstm::new(inputs, hf, variant, candidate, rng),
            bwd: Lstm::new(inputs, hb, variant, candidate, rng),
        })
    }

    pub fn from_parts(fwd: Lstm, bwd: Lstm) -> Self {
        BiLstm { fwd, bwd }
    }

    pub fn units(&self) -> (usize, usize) {
        (self.fwd.hidden(), self.bwd.hidden())
    }

    fn concat(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let batch = a.shape()[0];
        let (hf, hb) = self.units();
        let mut out = Vec::with_capacity(batch * (hf + hb));
        for r in 0..batch {
            out.extend_from_slice(&a.data()[r * hf..(r + 1) * hf]);
            out.extend_from_slice(&b.data()[r * hb..(r + 1) * hb]);
        }
        Tensor::new(vec![batch, hf + hb], out)
    }
}

impl Layer for BiLstm {
    fn name(&self) -> &'static str {
        "bilstm"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        expect_rank("bilstm input", input, 3)?;
        let a = self.fwd.forward(input)?;
        let b = self.bwd.forward(&reverse_time(input)?)?;
        self.concat(a, b)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        expect_rank("bilstm input", input, 3)?;
        let a = self.fwd.forward_train(input)?;
        let b = self.bwd.forward_train(&reverse_time(input)?)?;
        self.concat(a, b)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (hf, hb) = self.units();
        if grad_output.rank() != 2 || grad_output.shape()[1] != hf + hb {
            return Err(Error::shape("bilstm backward", grad_output.shape(), &[0, hf + hb]));
        }
        let batch = grad_output.shape()[0];
        let mut ga = Vec::with_capacity(batch * hf);
        let mut gb = Vec::with_capacity(batch * hb);
        for row in grad_output.data().chunks_exact(hf + hb) {
            ga.extend_from_slice(&row[..hf]);
            gb.extend_from_slice(&row[hf..]);
        }
        let da = self.fwd.backward(&Tensor::new(vec![batch, hf], ga)?)?;
        let db = reverse_time(&self.bwd.backward(&Tensor::new(vec![batch, hb], gb)?)?)?;
        da.add(&db)
    }

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (dir, net) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            out.extend(net.params().into_iter().map(|p| ParamRef {
                name: format!("{dir}.{}", p.name),
                value: p.value,
            }));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (dir, net) in [("fwd", &mut self.fwd), ("bwd", &mut self.bwd)] {
            out.extend(net.params_mut().into_iter().map(|p| ParamMut {
                name: format!("{dir}.{}", p.name),
                value: p.value,
                grad: p.grad,
            }));
        }
        out
    }
}
