//! Peephole LSTM layers with exact backpropagation through time.
//!
//! One step of a layer computes
//!
//! ```text
//! i = σ(W_xi x + W_hi h' + w_ci ⊙ c' + b_i)
//! f = σ(W_xf x + W_hf h' + w_cf ⊙ c' + b_f)
//! m = tanh(W_xc x + W_hc h' + b_c)
//! c = f ⊙ c' + i ⊙ m
//! o = σ(W_xo x + W_ho h' + w_co ⊙ c + b_o)
//! h = o ⊙ tanh(c)
//! ```
//!
//! where `h'`, `c'` are the previous state. Peephole weights are diagonal and
//! the output gate peeks at the *new* cell state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{prefixed, prefixed_mut, sigmoid, Matrix, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    input_dim: usize,
    hidden_dim: usize,
    pub w_xi: Matrix,
    pub w_xf: Matrix,
    pub w_xc: Matrix,
    pub w_xo: Matrix,
    pub w_hi: Matrix,
    pub w_hf: Matrix,
    pub w_hc: Matrix,
    pub w_ho: Matrix,
    pub w_ci: Matrix,
    pub w_cf: Matrix,
    pub w_co: Matrix,
    pub b_i: Matrix,
    pub b_f: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Activations of one forward step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub m: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let wx = || Matrix::zeros(hidden_dim, input_dim);
        let wh = || Matrix::zeros(hidden_dim, hidden_dim);
        let v = || Matrix::zeros(hidden_dim, 1);
        LstmLayerParams {
            input_dim,
            hidden_dim,
            w_xi: wx(),
            w_xf: wx(),
            w_xc: wx(),
            w_xo: wx(),
            w_hi: wh(),
            w_hf: wh(),
            w_hc: wh(),
            w_ho: wh(),
            w_ci: v(),
            w_cf: v(),
            w_co: v(),
            b_i: v(),
            b_f: v(),
            b_c: v(),
            b_o: v(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = LstmLayerParams::zeros(input_dim, hidden_dim);
        for (_, m) in p.blocks_mut() {
            *m = Matrix::uniform(m.rows(), m.cols(), scale, rng);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// One forward step of the cell.
    pub fn cell_forward(&self, x: &[f64], prev: &LstmState) -> Result<(LstmState, StepCache)> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "lstm input has dim {} but layer expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if prev.h.len() != self.hidden_dim || prev.c.len() != self.hidden_dim {
            return Err(Error::shape(format!(
                "lstm state has dims ({}, {}) but layer is {} wide",
                prev.h.len(),
                prev.c.len(),
                self.hidden_dim
            )));
        }
        Ok(self.forward_unchecked(x, prev))
    }

    fn forward_unchecked(&self, x: &[f64], prev: &LstmState) -> (LstmState, StepCache) {
        let n = self.hidden_dim;
        let pre = |wx: &Matrix, wh: &Matrix, b: &Matrix| {
            let mut a = b.as_slice().to_vec();
            wx.mul_vec_acc(x, &mut a);
            wh.mul_vec_acc(&prev.h, &mut a);
            a
        };
        let mut i = pre(&self.w_xi, &self.w_hi, &self.b_i);
        let mut f = pre(&self.w_xf, &self.w_hf, &self.b_f);
        let mut m = pre(&self.w_xc, &self.w_hc, &self.b_c);
        let mut o = pre(&self.w_xo, &self.w_ho, &self.b_o);
        let (w_ci, w_cf, w_co) = (
            self.w_ci.as_slice(),
            self.w_cf.as_slice(),
            self.w_co.as_slice(),
        );
        let mut c = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        let mut h = vec![0.0; n];
        for k in 0..n {
            i[k] = sigmoid(i[k] + w_ci[k] * prev.c[k]);
            f[k] = sigmoid(f[k] + w_cf[k] * prev.c[k]);
            m[k] = m[k].tanh();
            c[k] = f[k] * prev.c[k] + i[k] * m[k];
            o[k] = sigmoid(o[k] + w_co[k] * c[k]);
            tanh_c[k] = c[k].tanh();
            h[k] = o[k] * tanh_c[k];
        }
        let state = LstmState {
            h: h.clone(),
            c: c.clone(),
        };
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            m,
            o,
            c,
            tanh_c,
        };
        (state, cache)
    }

    /// Backward through one step.
    ///
    /// `dh` is the total gradient reaching this step's `h` (from above and
    /// from the next step), `dc_next` the gradient reaching `c` from the next
    /// step. Accumulates parameter gradients into `grads` and returns
    /// `(dx, dh_prev, dc_prev)`.
    pub fn cell_backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc_next: &[f64],
        grads: &mut LstmLayerParams,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden_dim;
        let (w_ci, w_cf, w_co) = (
            self.w_ci.as_slice(),
            self.w_cf.as_slice(),
            self.w_co.as_slice(),
        );
        let mut da_i = vec![0.0; n];
        let mut da_f = vec![0.0; n];
        let mut da_m = vec![0.0; n];
        let mut da_o = vec![0.0; n];
        let mut dc_prev = vec![0.0; n];
        {
            let g_ci = grads.w_ci.as_mut_slice();
            for k in 0..n {
                let o = cache.o[k];
                let tc = cache.tanh_c[k];
                da_o[k] = dh[k] * tc * o * (1.0 - o);
                let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc) + da_o[k] * w_co[k];
                let (i, f, m) = (cache.i[k], cache.f[k], cache.m[k]);
                da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
                da_i[k] = dc * m * i * (1.0 - i);
                da_m[k] = dc * i * (1.0 - m * m);
                dc_prev[k] = dc * f + da_i[k] * w_ci[k] + da_f[k] * w_cf[k];
                g_ci[k] += da_i[k] * cache.c_prev[k];
            }
        }
        for k in 0..n {
            grads.w_cf.as_mut_slice()[k] += da_f[k] * cache.c_prev[k];
            grads.w_co.as_mut_slice()[k] += da_o[k] * cache.c[k];
            grads.b_i.as_mut_slice()[k] += da_i[k];
            grads.b_f.as_mut_slice()[k] += da_f[k];
            grads.b_c.as_mut_slice()[k] += da_m[k];
            grads.b_o.as_mut_slice()[k] += da_o[k];
        }

        let mut dx = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; n];
        for (da, wx, wh, gx, gh) in [
            (&da_i, &self.w_xi, &self.w_hi, &mut grads.w_xi, &mut grads.w_hi),
            (&da_f, &self.w_xf, &self.w_hf, &mut grads.w_xf, &mut grads.w_hf),
            (&da_m, &self.w_xc, &self.w_hc, &mut grads.w_xc, &mut grads.w_hc),
            (&da_o, &self.w_xo, &self.w_ho, &mut grads.w_xo, &mut grads.w_ho),
        ] {
            gx.add_outer(da, &cache.x);
            gh.add_outer(da, &cache.h_prev);
            wx.mul_t_vec_acc(da, &mut dx);
            wh.mul_t_vec_acc(da, &mut dh_prev);
        }
        (dx, dh_prev, dc_prev)
    }
}

impl Parameters for LstmLayerParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_xi".into(), &self.w_xi),
            ("w_xf".into(), &self.w_xf),
            ("w_xc".into(), &self.w_xc),
            ("w_xo".into(), &self.w_xo),
            ("w_hi".into(), &self.w_hi),
            ("w_hf".into(), &self.w_hf),
            ("w_hc".into(), &self.w_hc),
            ("w_ho".into(), &self.w_ho),
            ("w_ci".into(), &self.w_ci),
            ("w_cf".into(), &self.w_cf),
            ("w_co".into(), &self.w_co),
            ("b_i".into(), &self.b_i),
            ("b_f".into(), &self.b_f),
            ("b_c".into(), &self.b_c),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_xi".into(), &mut self.w_xi),
            ("w_xf".into(), &mut self.w_xf),
            ("w_xc".into(), &mut self.w_xc),
            ("w_xo".into(), &mut self.w_xo),
            ("w_hi".into(), &mut self.w_hi),
            ("w_hf".into(), &mut self.w_hf),
            ("w_hc".into(), &mut self.w_hc),
            ("w_ho".into(), &mut self.w_ho),
            ("w_ci".into(), &mut self.w_ci),
            ("w_cf".into(), &mut self.w_cf),
            ("w_co".into(), &mut self.w_co),
            ("b_i".into(), &mut self.b_i),
            ("b_f".into(), &mut self.b_f),
            ("b_c".into(), &mut self.b_c),
            ("b_o".into(), &mut self.b_o),
        ]
    }
}

/// Per-step, per-layer caches of a stack: `caches[t][layer]`.
pub type SequenceCache = Vec<Vec<StepCache>>;

/// Layers wired bottom to top; layer `l` reads layer `l - 1`'s `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack {
    layers: Vec<LstmLayerParams>,
}

impl LstmStack {
    pub fn new(layers: Vec<LstmLayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an LSTM stack needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].hidden_dim {
                return Err(Error::Config(format!(
                    "layer {} expects input width {} but layer {} is {} wide",
                    l + 1,
                    pair[1].input_dim,
                    l,
                    pair[0].hidden_dim
                )));
            }
        }
        Ok(LstmStack { layers })
    }

    /// `num_layers` layers of width `hidden_dim`, initialized uniformly.
    pub fn uniform<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_dim } else { hidden_dim };
                LstmLayerParams::uniform(inp, hidden_dim, scale, rng)
            })
            .collect();
        LstmStack::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        LstmStack {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams::zeros(l.input_dim, l.hidden_dim))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LstmLayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LstmLayerParams] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_dim
    }

    pub fn zero_states(&self) -> Vec<LstmState> {
        self.layers
            .iter()
            .map(|l| LstmState::zeros(l.hidden_dim))
            .collect()
    }

    fn check_states(&self, states: &[LstmState]) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} states for a {}-layer stack",
                states.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Advances every layer by one step, updating `states` in place.
    /// Returns the top layer's `h` and the per-layer caches.
    pub fn step(&self, x: &[f64], states: &mut [LstmState]) -> Result<(Vec<f64>, Vec<StepCache>)> {
        self.check_states(states)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
            let (next, cache) = layer.cell_forward(&input, state)?;
            input = next.h.clone();
            *state = next;
            caches.push(cache);
        }
        Ok((input, caches))
    }

    /// Runs the stack over a whole sequence starting from `init`.
    pub fn sequence_forward(
        &self,
        inputs: &[Vec<f64>],
        init: &[LstmState],
    ) -> Result<(Vec<Vec<f64>>, SequenceCache)> {
        self.check_states(init)?;
        let mut states = init.to_vec();
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (h, c) = self.step(x, &mut states)?;
            outputs.push(h);
            caches.push(c);
        }
        Ok((outputs, caches))
    }

    /// Full BPTT over a cached forward pass. Returns the parameter gradients
    /// and the gradient with respect to every input vector.
    pub fn sequence_backward(
        &self,
        caches: &SequenceCache,
        output_grads: &[Vec<f64>],
    ) -> Result<(LstmStack, Vec<Vec<f64>>)> {
        let mut grads = self.zeros_like();
        let input_grads = self.sequence_backward_into(caches, output_grads, &mut grads)?;
        Ok((grads, input_grads))
    }

    /// As [`LstmStack::sequence_backward`], accumulating into `grads`.
    pub fn sequence_backward_into(
        &self,
        caches: &SequenceCache,
        output_grads: &[Vec<f64>],
        grads: &mut LstmStack,
    ) -> Result<Vec<Vec<f64>>> {
        if caches.len() != output_grads.len() {
            return Err(Error::shape(format!(
                "{} cached steps but {} output gradients",
                caches.len(),
                output_grads.len()
            )));
        }
        let mut bp = StackBackprop::new(self);
        let mut input_grads = vec![Vec::new(); caches.len()];
        for t in (0..caches.len()).rev() {
            input_grads[t] = bp.step(self, &caches[t], &output_grads[t], grads)?;
        }
        Ok(input_grads)
    }
}

/// Step-by-step BPTT driver holding the recurrent gradients of each layer.
///
/// Call [`StackBackprop::step`] for `t = T-1, ..., 0` in order.
pub struct StackBackprop {
    dh: Vec<Vec<f64>>,
    dc: Vec<Vec<f64>>,
}

impl StackBackprop {
    pub fn new(stack: &LstmStack) -> Self {
        StackBackprop {
            dh: stack.layers.iter().map(|l| vec![0.0; l.hidden_dim]).collect(),
            dc: stack.layers.iter().map(|l| vec![0.0; l.hidden_dim]).collect(),
        }
    }

    /// Backpropagates one step given the gradient on the top layer's output.
    /// Returns the gradient on that step's input.
    pub fn step(
        &mut self,
        stack: &LstmStack,
        caches: &[StepCache],
        dh_top: &[f64],
        grads: &mut LstmStack,
    ) -> Result<Vec<f64>> {
        if caches.len() != stack.layers.len() {
            return Err(Error::shape(format!(
                "{} layer caches for a {}-layer stack",
                caches.len(),
                stack.layers.len()
            )));
        }
        if dh_top.len() != stack.output_dim() {
            return Err(Error::shape(format!(
                "output gradient has dim {} but stack output is {}",
                dh_top.len(),
                stack.output_dim()
            )));
        }
        let mut from_above = dh_top.to_vec();
        for l in (0..stack.layers.len()).rev() {
            let mut dh = std::mem::take(&mut self.dh[l]);
            for (a, b) in dh.iter_mut().zip(&from_above) {
                *a += b;
            }
            let (dx, dh_prev, dc_prev) =
                stack.layers[l].cell_backward(&caches[l], &dh, &self.dc[l], &mut grads.layers[l]);
            self.dh[l] = dh_prev;
            self.dc[l] = dc_prev;
            from_above = dx;
        }
        Ok(from_above)
    }
}

impl Parameters for LstmStack {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| prefixed(&format!("layer{l}"), p.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, p)| prefixed_mut(&format!("layer{l}"), p.blocks_mut()))
            .collect()
    }
}
