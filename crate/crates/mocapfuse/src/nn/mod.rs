//! Recurrent networks and optimizers.
//!
//! Everything here is plain `f64` arithmetic on flat parameter vectors:
//! gated recurrent layers with hand-derived backpropagation through time, a
//! small feed-forward state initializer, Adam, and L-BFGS. Loss heads that
//! need structured gradients (rotation assembly, forward kinematics) build
//! them with the scalar tape in [`tape`].

pub mod checkpoint;
pub mod lbfgs;
pub mod tape;

pub use lbfgs::{lbfgs_minimize, LbfgsResult};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::skeleton::KinematicTree;
use crate::{Error, Result};

/// Output nonlinearity applied after the readout layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Pre-activation gradient from the post-activation value and its adjoint.
    fn backward(self, y: f64, dy: f64) -> f64 {
        match self {
            Activation::Linear => dy,
            Activation::Sigmoid => dy * y * (1.0 - y),
            Activation::Tanh => dy * (1.0 - y * y),
        }
    }
}

/// Per-layer hidden vectors of a recurrent network.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(layer_count: usize, hidden_size: usize) -> Self {
        HiddenState {
            layers: vec![vec![0.0; hidden_size]; layer_count],
        }
    }

    /// Splits a layer-major flat vector (layer 0 first) into per-layer states.
    pub fn from_flat(flat: &[f64], layer_count: usize, hidden_size: usize) -> Result<Self> {
        if flat.len() != layer_count * hidden_size {
            return Err(Error::DimensionMismatch {
                expected: layer_count * hidden_size,
                got: flat.len(),
                context: "hidden state",
            });
        }
        Ok(HiddenState {
            layers: flat.chunks(hidden_size).map(|c| c.to_vec()).collect(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wn: usize,
    un: usize,
    bn: usize,
    input: usize,
}

/// Stacked gated recurrent network with a linear (optionally squashed)
/// readout. Parameters live in one flat vector so optimizers can treat the
/// network as a point in R^n.
#[derive(Debug, Clone)]
pub struct RecurrentNet {
    pub input_size: usize,
    pub hidden_size: usize,
    pub layer_count: usize,
    pub output_size: usize,
    pub activation: Activation,
    pub seed: u64,
    pub params: Vec<f64>,
    layers: Vec<LayerOffsets>,
    wo: usize,
    bo: usize,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[r] += acc;
    }
}

fn matvec_t(w: &[f64], rows: usize, cols: usize, d: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let dr = d[r];
        if dr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += dr * a;
        }
    }
}

fn outer_add(gw: &mut [f64], rows: usize, cols: usize, d: &[f64], x: &[f64]) {
    for r in 0..rows {
        let row = &mut gw[r * cols..(r + 1) * cols];
        let dr = d[r];
        if dr == 0.0 {
            continue;
        }
        for (o, a) in row.iter_mut().zip(x) {
            *o += dr * a;
        }
    }
}

/// Everything needed to run the backward pass of one step of one layer.
#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    h_new: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StepCache {
    layers: Vec<LayerCache>,
    y: Vec<f64>,
}

impl RecurrentNet {
    pub fn new(
        input_size: usize,
        hidden_size: usize,
        layer_count: usize,
        output_size: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        assert!(layer_count >= 1 && hidden_size >= 1);
        let mut layers = Vec::with_capacity(layer_count);
        let mut at = 0;
        for l in 0..layer_count {
            let input = if l == 0 { input_size } else { hidden_size };
            let (h, hi, hh) = (hidden_size, hidden_size * input, hidden_size * hidden_size);
            let o = LayerOffsets {
                wz: at,
                uz: at + hi,
                bz: at + hi + hh,
                wr: at + hi + hh + h,
                ur: at + 2 * hi + hh + h,
                br: at + 2 * hi + 2 * hh + h,
                wn: at + 2 * hi + 2 * hh + 2 * h,
                un: at + 3 * hi + 2 * hh + 2 * h,
                bn: at + 3 * hi + 3 * hh + 2 * h,
                input,
            };
            at += 3 * (hi + hh + h);
            layers.push(o);
        }
        let wo = at;
        let bo = at + output_size * hidden_size;
        let total = bo + output_size;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; total];
        let mut fill = |range: std::ops::Range<usize>, cols: usize, params: &mut [f64]| {
            let bound = 1.0 / (cols as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for o in &layers {
            let (h, hi, hh) = (hidden_size, hidden_size * o.input, hidden_size * hidden_size);
            fill(o.wz..o.wz + hi, o.input, &mut params);
            fill(o.uz..o.uz + hh, hidden_size, &mut params);
            fill(o.wr..o.wr + hi, o.input, &mut params);
            fill(o.ur..o.ur + hh, hidden_size, &mut params);
            fill(o.wn..o.wn + hi, o.input, &mut params);
            fill(o.un..o.un + hh, hidden_size, &mut params);
            let _ = h;
        }
        fill(wo..wo + output_size * hidden_size, hidden_size, &mut params);

        RecurrentNet {
            input_size,
            hidden_size,
            layer_count,
            output_size,
            activation,
            seed,
            params,
            layers,
            wo,
            bo,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_hidden(&self) -> HiddenState {
        HiddenState::zeros(self.layer_count, self.hidden_size)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size {
            return Err(Error::DimensionMismatch {
                expected: self.input_size,
                got: x.len(),
                context: "network input",
            });
        }
        Ok(())
    }

    fn check_hidden(&self, h: &HiddenState) -> Result<()> {
        if h.layers.len() != self.layer_count
            || h.layers.iter().any(|l| l.len() != self.hidden_size)
        {
            return Err(Error::DimensionMismatch {
                expected: self.layer_count * self.hidden_size,
                got: h.layers.iter().map(Vec::len).sum(),
                context: "hidden state",
            });
        }
        Ok(())
    }

    fn step_cached(&self, x: &[f64], hidden: &HiddenState) -> (StepCache, HiddenState) {
        let h = self.hidden_size;
        let mut layer_caches = Vec::with_capacity(self.layer_count);
        let mut new_hidden = Vec::with_capacity(self.layer_count);
        let mut xin = x.to_vec();
        for (l, o) in self.layers.iter().enumerate() {
            let hp = &hidden.layers[l];
            let p = &self.params;
            let mut z = p[o.bz..o.bz + h].to_vec();
            matvec(&p[o.wz..], h, o.input, &xin, &mut z);
            matvec(&p[o.uz..], h, h, hp, &mut z);
            for v in z.iter_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
            let mut r = p[o.br..o.br + h].to_vec();
            matvec(&p[o.wr..], h, o.input, &xin, &mut r);
            matvec(&p[o.ur..], h, h, hp, &mut r);
            for v in r.iter_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
            let rh: Vec<f64> = r.iter().zip(hp).map(|(a, b)| a * b).collect();
            let mut n = p[o.bn..o.bn + h].to_vec();
            matvec(&p[o.wn..], h, o.input, &xin, &mut n);
            matvec(&p[o.un..], h, h, &rh, &mut n);
            for v in n.iter_mut() {
                *v = v.tanh();
            }
            let h_new: Vec<f64> = (0..h)
                .map(|i| (1.0 - z[i]) * n[i] + z[i] * hp[i])
                .collect();
            layer_caches.push(LayerCache {
                x: xin.clone(),
                h_prev: hp.clone(),
                z,
                r,
                n,
                h_new: h_new.clone(),
            });
            new_hidden.push(h_new.clone());
            xin = h_new;
        }
        let mut y = self.params[self.bo..self.bo + self.output_size].to_vec();
        matvec(
            &self.params[self.wo..],
            self.output_size,
            self.hidden_size,
            &xin,
            &mut y,
        );
        for v in y.iter_mut() {
            *v = self.activation.apply(*v);
        }
        (
            StepCache {
                layers: layer_caches,
                y: y.clone(),
            },
            HiddenState { layers: new_hidden },
        )
    }

    /// One frame forward; returns the output and the advanced hidden state.
    pub fn forward_step(&self, x: &[f64], hidden: &HiddenState) -> Result<(Vec<f64>, HiddenState)> {
        self.check_input(x)?;
        self.check_hidden(hidden)?;
        let (cache, h) = self.step_cached(x, hidden);
        Ok((cache.y, h))
    }

    /// Runs a whole sequence. Splitting a sequence at any point and handing
    /// the hidden state across produces bit-identical outputs.
    pub fn forward_sequence(
        &self,
        inputs: &[Vec<f64>],
        hidden: &HiddenState,
    ) -> Result<(Vec<Vec<f64>>, HiddenState)> {
        let mut h = hidden.clone();
        self.check_hidden(&h)?;
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (y, hn) = self.forward_step(x, &h)?;
            out.push(y);
            h = hn;
        }
        Ok((out, h))
    }

    fn forward_cached(
        &self,
        inputs: &[Vec<f64>],
        hidden: &HiddenState,
    ) -> Result<(Vec<StepCache>, HiddenState)> {
        self.check_hidden(hidden)?;
        let mut h = hidden.clone();
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(x)?;
            let (c, hn) = self.step_cached(x, &h);
            caches.push(c);
            h = hn;
        }
        Ok((caches, h))
    }

    fn backward_sequence(
        &self,
        caches: &[StepCache],
        dl_dy: &[Vec<f64>],
    ) -> (Vec<f64>, HiddenState) {
        let h = self.hidden_size;
        let mut gp = vec![0.0; self.params.len()];
        let mut carry: Vec<Vec<f64>> = vec![vec![0.0; h]; self.layer_count];
        for (cache, dy) in caches.iter().zip(dl_dy).rev() {
            // Readout.
            let da: Vec<f64> = cache
                .y
                .iter()
                .zip(dy)
                .map(|(&y, &d)| self.activation.backward(y, d))
                .collect();
            let top = &cache.layers[self.layer_count - 1].h_new;
            outer_add(
                &mut gp[self.wo..],
                self.output_size,
                self.hidden_size,
                &da,
                top,
            );
            for (i, d) in da.iter().enumerate() {
                gp[self.bo + i] += d;
            }
            matvec_t(
                &self.params[self.wo..],
                self.output_size,
                self.hidden_size,
                &da,
                &mut carry[self.layer_count - 1],
            );

            for l in (0..self.layer_count).rev() {
                let o = &self.layers[l];
                let lc = &cache.layers[l];
                let dh = std::mem::replace(&mut carry[l], vec![0.0; h]);

                let mut da_z = vec![0.0; h];
                let mut da_r = vec![0.0; h];
                let mut da_n = vec![0.0; h];
                let mut drh = vec![0.0; h];
                for i in 0..h {
                    let dz = dh[i] * (lc.h_prev[i] - lc.n[i]);
                    da_z[i] = dz * lc.z[i] * (1.0 - lc.z[i]);
                    let dn = dh[i] * (1.0 - lc.z[i]);
                    da_n[i] = dn * (1.0 - lc.n[i] * lc.n[i]);
                }
                matvec_t(&self.params[o.un..], h, h, &da_n, &mut drh);
                for i in 0..h {
                    let dr = drh[i] * lc.h_prev[i];
                    da_r[i] = dr * lc.r[i] * (1.0 - lc.r[i]);
                }

                let mut dh_prev = vec![0.0; h];
                for i in 0..h {
                    dh_prev[i] = dh[i] * lc.z[i] + drh[i] * lc.r[i];
                }
                matvec_t(&self.params[o.uz..], h, h, &da_z, &mut dh_prev);
                matvec_t(&self.params[o.ur..], h, h, &da_r, &mut dh_prev);

                let rh: Vec<f64> = lc.r.iter().zip(&lc.h_prev).map(|(a, b)| a * b).collect();
                outer_add(&mut gp[o.wz..], h, o.input, &da_z, &lc.x);
                outer_add(&mut gp[o.uz..], h, h, &da_z, &lc.h_prev);
                outer_add(&mut gp[o.wr..], h, o.input, &da_r, &lc.x);
                outer_add(&mut gp[o.ur..], h, h, &da_r, &lc.h_prev);
                outer_add(&mut gp[o.wn..], h, o.input, &da_n, &lc.x);
                outer_add(&mut gp[o.un..], h, h, &da_n, &rh);
                for i in 0..h {
                    gp[o.bz + i] += da_z[i];
                    gp[o.br + i] += da_r[i];
                    gp[o.bn + i] += da_n[i];
                }

                carry[l] = dh_prev;
                if l > 0 {
                    let mut dx = vec![0.0; o.input];
                    matvec_t(&self.params[o.wz..], h, o.input, &da_z, &mut dx);
                    matvec_t(&self.params[o.wr..], h, o.input, &da_r, &mut dx);
                    matvec_t(&self.params[o.wn..], h, o.input, &da_n, &mut dx);
                    for (c, d) in carry[l - 1].iter_mut().zip(&dx) {
                        *c += d;
                    }
                }
            }
        }
        (gp, HiddenState { layers: carry })
    }

    /// Backpropagation through time: parameter gradients and the gradient
    /// with respect to the initial hidden state, given per-step output
    /// adjoints.
    pub fn gradients(
        &self,
        inputs: &[Vec<f64>],
        hidden: &HiddenState,
        dl_dy: &[Vec<f64>],
    ) -> Result<(Vec<f64>, HiddenState)> {
        if inputs.len() != dl_dy.len() {
            return Err(Error::LengthMismatch(inputs.len(), dl_dy.len()));
        }
        let (caches, _) = self.forward_cached(inputs, hidden)?;
        Ok(self.backward_sequence(&caches, dl_dy))
    }
}

/// Two-layer feed-forward network mapping an observation vector to an
/// initial hidden state for a recurrent network. Both layers use tanh, so
/// outputs stay inside the reachable range of gated hidden units.
#[derive(Debug, Clone)]
pub struct InitializerNet {
    pub input_size: usize,
    pub hidden_size: usize,
    pub output_size: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl InitializerNet {
    pub fn new(input_size: usize, hidden_size: usize, output_size: usize, seed: u64) -> Self {
        let total = hidden_size * input_size + hidden_size + output_size * hidden_size + output_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; total];
        let b1 = 1.0 / (input_size as f64).sqrt();
        for p in &mut params[..hidden_size * input_size] {
            *p = rng.random_range(-b1..b1);
        }
        let w2 = hidden_size * input_size + hidden_size;
        let b2 = 1.0 / (hidden_size as f64).sqrt();
        for p in &mut params[w2..w2 + output_size * hidden_size] {
            *p = rng.random_range(-b2..b2);
        }
        InitializerNet {
            input_size,
            hidden_size,
            output_size,
            seed,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden_size * self.input_size;
        let w2 = b1 + self.hidden_size;
        let b2 = w2 + self.output_size * self.hidden_size;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, _, y) = self.forward_cached(x)?;
        Ok(y)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_size {
            return Err(Error::DimensionMismatch {
                expected: self.input_size,
                got: x.len(),
                context: "initializer input",
            });
        }
        let (b1, w2, b2) = self.offsets();
        let mut a1 = self.params[b1..b1 + self.hidden_size].to_vec();
        matvec(&self.params[..b1], self.hidden_size, self.input_size, x, &mut a1);
        for v in a1.iter_mut() {
            *v = v.tanh();
        }
        let mut y = self.params[b2..b2 + self.output_size].to_vec();
        matvec(
            &self.params[w2..],
            self.output_size,
            self.hidden_size,
            &a1,
            &mut y,
        );
        for v in y.iter_mut() {
            *v = v.tanh();
        }
        Ok((x.to_vec(), a1, y))
    }

    fn backward(&self, cache: &(Vec<f64>, Vec<f64>, Vec<f64>), dy: &[f64]) -> Vec<f64> {
        let (x, a1, y) = cache;
        let (b1, w2, b2) = self.offsets();
        let mut gp = vec![0.0; self.params.len()];
        let da2: Vec<f64> = y.iter().zip(dy).map(|(&v, &d)| d * (1.0 - v * v)).collect();
        outer_add(
            &mut gp[w2..],
            self.output_size,
            self.hidden_size,
            &da2,
            a1,
        );
        for (i, d) in da2.iter().enumerate() {
            gp[b2 + i] += d;
        }
        let mut dh = vec![0.0; self.hidden_size];
        matvec_t(
            &self.params[w2..],
            self.output_size,
            self.hidden_size,
            &da2,
            &mut dh,
        );
        let da1: Vec<f64> = a1.iter().zip(&dh).map(|(&v, &d)| d * (1.0 - v * v)).collect();
        outer_add(&mut gp[..b1], self.hidden_size, self.input_size, &da1, x);
        for (i, d) in da1.iter().enumerate() {
            gp[b1 + i] += d;
        }
        gp
    }

    /// Produces an initial hidden state for a network with the given shape.
    pub fn hidden_for(&self, obs: &[f64], net: &RecurrentNet) -> Result<HiddenState> {
        let y = self.forward(obs)?;
        HiddenState::from_flat(&y, net.layer_count, net.hidden_size)
    }
}

/// Stateful wrapper pairing a network with its running hidden state.
#[derive(Debug, Clone)]
pub struct NetRunner {
    pub net: RecurrentNet,
    hidden: HiddenState,
}

impl NetRunner {
    pub fn new(net: RecurrentNet) -> Self {
        let hidden = net.zero_hidden();
        NetRunner { net, hidden }
    }

    /// Advances the hidden state and returns the frame output.
    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (y, h) = self.net.forward_step(x, &self.hidden)?;
        self.hidden = h;
        Ok(y)
    }

    /// Runs a step without committing the hidden state.
    pub fn peek(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (y, _) = self.net.forward_step(x, &self.hidden)?;
        Ok(y)
    }

    pub fn get_hidden(&self) -> &HiddenState {
        &self.hidden
    }

    pub fn set_hidden(&mut self, h: HiddenState) -> Result<()> {
        self.net.check_hidden(&h)?;
        self.hidden = h;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.hidden = self.net.zero_hidden();
    }
}

/// Loss attached to a network's output stream.
#[derive(Debug, Clone)]
pub enum LossKind {
    /// Mean over frames of the squared error summed over dimensions.
    MeanSquared,
    /// Binary cross entropy; expects sigmoid-activated outputs.
    BinaryCrossEntropy,
    /// Joint 6D-rotation and forward-kinematics loss. Each target row is the
    /// ground-truth 6D block (6 per joint) followed by the flattened
    /// root-relative joint positions (3 per joint).
    RotationFk {
        tree: KinematicTree,
        lambda_rot: f64,
        lambda_pos: f64,
    },
}

impl LossKind {
    /// Loss value and per-frame output adjoints for one chunk.
    pub fn loss_and_grad(
        &self,
        outputs: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if outputs.len() != targets.len() {
            return Err(Error::LengthMismatch(outputs.len(), targets.len()));
        }
        let t = outputs.len().max(1) as f64;
        match self {
            LossKind::MeanSquared => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(outputs.len());
                for (y, tgt) in outputs.iter().zip(targets) {
                    if y.len() != tgt.len() {
                        return Err(Error::LengthMismatch(y.len(), tgt.len()));
                    }
                    let mut g = Vec::with_capacity(y.len());
                    for (a, b) in y.iter().zip(tgt) {
                        let d = a - b;
                        total += d * d;
                        g.push(2.0 * d / t);
                    }
                    grads.push(g);
                }
                Ok((total / t, grads))
            }
            LossKind::BinaryCrossEntropy => {
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(outputs.len());
                for (y, tgt) in outputs.iter().zip(targets) {
                    if y.len() != tgt.len() {
                        return Err(Error::LengthMismatch(y.len(), tgt.len()));
                    }
                    let mut g = Vec::with_capacity(y.len());
                    for (a, c) in y.iter().zip(tgt) {
                        let p = a.clamp(1e-7, 1.0 - 1e-7);
                        total -= c * p.ln() + (1.0 - c) * (1.0 - p).ln();
                        g.push((p - c) / (p * (1.0 - p)) / t);
                    }
                    grads.push(g);
                }
                Ok((total / t, grads))
            }
            LossKind::RotationFk {
                tree,
                lambda_rot,
                lambda_pos,
            } => {
                let joints = tree.joint_count();
                let mut total = 0.0;
                let mut grads = Vec::with_capacity(outputs.len());
                for (y, tgt) in outputs.iter().zip(targets) {
                    if y.len() != 6 * joints {
                        return Err(Error::DimensionMismatch {
                            expected: 6 * joints,
                            got: y.len(),
                            context: "rotation head output",
                        });
                    }
                    if tgt.len() != 9 * joints {
                        return Err(Error::DimensionMismatch {
                            expected: 9 * joints,
                            got: tgt.len(),
                            context: "rotation head target",
                        });
                    }
                    let (phi_gt, pos_gt) = tgt.split_at(6 * joints);
                    let mut tp = tape::Tape::new();
                    let vars: Vec<tape::Var> = y.iter().map(|&v| tp.input(v)).collect();
                    let mut terms = Vec::new();
                    for (v, g) in vars.iter().zip(phi_gt) {
                        let d = tp.add_const(*v, -g);
                        let sq = tp.square(d);
                        terms.push(tp.scale(sq, *lambda_rot));
                    }
                    let locals: Vec<tape::TMat3> = (0..joints)
                        .map(|j| {
                            let six: [tape::Var; 6] =
                                std::array::from_fn(|i| vars[6 * j + i]);
                            tape::mat_from_6d(&mut tp, &six)
                        })
                        .collect();
                    let (pos, _) = tape::fk_on_tape(&mut tp, tree, &locals);
                    for (j, p) in pos.iter().enumerate() {
                        for k in 0..3 {
                            let d = tp.add_const(p.0[k], -pos_gt[3 * j + k]);
                            let sq = tp.square(d);
                            terms.push(tp.scale(sq, *lambda_pos));
                        }
                    }
                    let loss = tp.sum(&terms);
                    total += tp.value(loss);
                    let adj = tp.backward(loss);
                    grads.push(
                        vars.iter()
                            .map(|&v| tape::Tape::grad(&adj, v) / t)
                            .collect(),
                    );
                }
                Ok((total / t, grads))
            }
        }
    }
}

/// One training sequence: per-frame inputs and loss targets, plus optional
/// observations handed to the state initializer at chunk starts.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub init_obs: Option<Vec<Vec<f64>>>,
}

/// Gradient-descent settings shared by all networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Chunks accumulated per optimizer update.
    pub batch_size: usize,
    /// Frames per truncated-backpropagation chunk.
    pub chunk_len: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient norm ceiling; applied per update.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            chunk_len: 64,
            epochs: 30,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

/// Per-epoch mean chunk losses; entry 0 is an update-free evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Loss and gradients for one chunk, including the initializer path when an
/// initializer provides the starting hidden state. Exposed so integration
/// tests can cross-check against finite differences.
pub fn chunk_loss_and_grads(
    net: &RecurrentNet,
    initializer: Option<&InitializerNet>,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    init_ob: Option<&[f64]>,
    loss: &LossKind,
) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
    let (h0, init_cache) = match (initializer, init_ob) {
        (Some(init), Some(obs)) => {
            let cache = init.forward_cached(obs)?;
            let h = HiddenState::from_flat(&cache.2, net.layer_count, net.hidden_size)?;
            (h, Some(cache))
        }
        _ => (net.zero_hidden(), None),
    };
    let (caches, _) = net.forward_cached(inputs, &h0)?;
    let outputs: Vec<Vec<f64>> = caches.iter().map(|c| c.y.clone()).collect();
    let (value, dl_dy) = loss.loss_and_grad(&outputs, targets)?;
    let (gp, dh0) = net.backward_sequence(&caches, &dl_dy);
    let init_grads = match (initializer, init_cache) {
        (Some(init), Some(cache)) => Some(init.backward(&cache, &dh0.flatten())),
        _ => None,
    };
    Ok((value, gp, init_grads))
}

fn clip_joint(net_grad: &mut [f64], init_grad: Option<&mut Vec<f64>>, limit: f64) {
    let mut sq: f64 = net_grad.iter().map(|v| v * v).sum();
    if let Some(ref g) = init_grad {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > limit {
        let s = limit / norm;
        for v in net_grad.iter_mut() {
            *v *= s;
        }
        if let Some(g) = init_grad {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains a network (and optionally its state initializer, jointly) with
/// Adam over truncated backpropagation chunks.
///
/// Sequences are visited in a seeded shuffled order each epoch; chunks
/// within a sequence run in order, carrying the detached hidden state unless
/// an initializer re-seeds it at each chunk start. A non-finite chunk loss
/// aborts training.
pub fn train(
    net: &mut RecurrentNet,
    mut initializer: Option<&mut InitializerNet>,
    data: &[TrainSequence],
    loss: &LossKind,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    for seq in data {
        if seq.inputs.len() != seq.targets.len() {
            return Err(Error::LengthMismatch(seq.inputs.len(), seq.targets.len()));
        }
        if let Some(obs) = &seq.init_obs {
            if obs.len() != seq.inputs.len() {
                return Err(Error::LengthMismatch(obs.len(), seq.inputs.len()));
            }
        }
    }
    let chunk_len = cfg.chunk_len.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.param_count());
    let mut init_adam = initializer.as_ref().map(|i| Adam::new(i.param_count()));

    let eval_pass = |net: &RecurrentNet, init: Option<&InitializerNet>| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in data {
            let mut h = net.zero_hidden();
            for start in (0..seq.inputs.len()).step_by(chunk_len) {
                let end = (start + chunk_len).min(seq.inputs.len());
                if let (Some(init), Some(obs)) = (init, &seq.init_obs) {
                    h = init.hidden_for(&obs[start], net)?;
                }
                let (ys, hn) = net.forward_sequence(&seq.inputs[start..end], &h)?;
                h = hn;
                let (v, _) = loss.loss_and_grad(&ys, &seq.targets[start..end])?;
                total += v;
                count += 1;
            }
        }
        Ok(total / count as f64)
    };

    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(eval_pass(net, initializer.as_deref())?);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_total = 0.0;
        let mut epoch_chunks = 0usize;
        let mut acc = vec![0.0; net.param_count()];
        let mut init_acc = initializer.as_ref().map(|i| vec![0.0; i.param_count()]);
        let mut pending = 0usize;
        for &si in &order {
            let seq = &data[si];
            let mut h = net.zero_hidden();
            for start in (0..seq.inputs.len()).step_by(chunk_len) {
                let end = (start + chunk_len).min(seq.inputs.len());
                let obs = seq.init_obs.as_ref().map(|o| o[start].as_slice());
                let use_init = initializer.is_some() && obs.is_some();
                let (h0, init_cache) = if use_init {
                    let init = initializer.as_deref().unwrap();
                    let cache = init.forward_cached(obs.unwrap())?;
                    let hs =
                        HiddenState::from_flat(&cache.2, net.layer_count, net.hidden_size)?;
                    (hs, Some(cache))
                } else {
                    (h.clone(), None)
                };
                let (caches, hn) = net.forward_cached(&seq.inputs[start..end], &h0)?;
                h = hn;
                let outputs: Vec<Vec<f64>> = caches.iter().map(|c| c.y.clone()).collect();
                let (v, dl_dy) = loss.loss_and_grad(&outputs, &seq.targets[start..end])?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "epoch {epoch}, sequence {si}, frames {start}..{end}"
                    )));
                }
                epoch_total += v;
                epoch_chunks += 1;
                let (gp, dh0) = net.backward_sequence(&caches, &dl_dy);
                for (a, g) in acc.iter_mut().zip(&gp) {
                    *a += g;
                }
                if let (Some(init), Some(cache)) = (initializer.as_deref(), init_cache) {
                    let gi = init.backward(&cache, &dh0.flatten());
                    let ia = init_acc.as_mut().unwrap();
                    for (a, g) in ia.iter_mut().zip(&gi) {
                        *a += g;
                    }
                }
                pending += 1;
                if pending == cfg.batch_size.max(1) {
                    let scale = 1.0 / pending as f64;
                    for v in acc.iter_mut() {
                        *v *= scale;
                    }
                    if let Some(ia) = init_acc.as_mut() {
                        for v in ia.iter_mut() {
                            *v *= scale;
                        }
                    }
                    clip_joint(&mut acc, init_acc.as_mut(), cfg.grad_clip);
                    adam.step(cfg.learning_rate, &mut net.params, &acc);
                    if let (Some(init), Some(ia), Some(opt)) = (
                        initializer.as_deref_mut(),
                        init_acc.as_ref(),
                        init_adam.as_mut(),
                    ) {
                        opt.step(cfg.learning_rate, &mut init.params, ia);
                    }
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    if let Some(ia) = init_acc.as_mut() {
                        ia.iter_mut().for_each(|v| *v = 0.0);
                    }
                    pending = 0;
                }
            }
        }
        if pending > 0 {
            let scale = 1.0 / pending as f64;
            for v in acc.iter_mut() {
                *v *= scale;
            }
            if let Some(ia) = init_acc.as_mut() {
                for v in ia.iter_mut() {
                    *v *= scale;
                }
            }
            clip_joint(&mut acc, init_acc.as_mut(), cfg.grad_clip);
            adam.step(cfg.learning_rate, &mut net.params, &acc);
            if let (Some(init), Some(ia), Some(opt)) = (
                initializer.as_deref_mut(),
                init_acc.as_ref(),
                init_adam.as_mut(),
            ) {
                opt.step(cfg.learning_rate, &mut init.params, ia);
            }
        }
        losses.push(epoch_total / epoch_chunks.max(1) as f64);
    }
    Ok(TrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_net(input: usize, output: usize, activation: Activation, seed: u64) -> RecurrentNet {
        RecurrentNet::new(input, 8, 2, output, activation, seed)
    }

    fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize, span: f64) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.random_range(-span..span)).collect())
            .collect()
    }

    fn fd_param_grad(
        eval: &mut dyn FnMut(&[f64]) -> f64,
        params: &[f64],
        h: f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut p = params.to_vec();
                p[i] += h;
                let fp = eval(&p);
                p[i] -= 2.0 * h;
                let fm = eval(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = a.iter().zip(b).map(|(x, y)| x * x + y * y).sum::<f64>().sqrt();
        if den < 1e-12 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn forward_step_checks_dimensions() {
        let net = toy_net(6, 3, Activation::Linear, 1);
        let h = net.zero_hidden();
        assert!(net.forward_step(&[0.0; 5], &h).is_err());
        assert!(net.forward_step(&[0.0; 6], &h).is_ok());
        let bad = HiddenState::zeros(2, 7);
        assert!(net.forward_step(&[0.0; 6], &bad).is_err());
    }

    #[test]
    fn sequence_split_is_bit_exact() {
        let net = toy_net(6, 3, Activation::Linear, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = random_rows(&mut rng, 10, 6, 1.0);
        let h0 = net.zero_hidden();
        let (full, hf) = net.forward_sequence(&inputs, &h0).unwrap();
        let (head, hm) = net.forward_sequence(&inputs[..4], &h0).unwrap();
        let (tail, ht) = net.forward_sequence(&inputs[4..], &hm).unwrap();
        let joined: Vec<Vec<f64>> = head.into_iter().chain(tail).collect();
        assert_eq!(full, joined);
        assert_eq!(hf, ht);
    }

    #[test]
    fn bptt_matches_finite_differences_mse() {
        let net = toy_net(6, 5, Activation::Linear, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = random_rows(&mut rng, 5, 6, 1.0);
        let targets = random_rows(&mut rng, 5, 5, 1.0);
        let loss = LossKind::MeanSquared;
        let (_, got, _) =
            chunk_loss_and_grads(&net, None, &inputs, &targets, None, &loss).unwrap();
        let mut eval = |p: &[f64]| {
            let mut n = net.clone();
            n.params = p.to_vec();
            let (ys, _) = n.forward_sequence(&inputs, &n.zero_hidden()).unwrap();
            loss.loss_and_grad(&ys, &targets).unwrap().0
        };
        let fd = fd_param_grad(&mut eval, &net.params, 1e-4);
        let e = rel_err(&got, &fd);
        assert!(e < 1e-3, "rel err {e}");
    }

    #[test]
    fn bptt_matches_finite_differences_bce() {
        let net = toy_net(4, 2, Activation::Sigmoid, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = random_rows(&mut rng, 5, 4, 1.0);
        let targets: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| f64::from(rng.random::<bool>())).collect())
            .collect();
        let loss = LossKind::BinaryCrossEntropy;
        let (_, got, _) =
            chunk_loss_and_grads(&net, None, &inputs, &targets, None, &loss).unwrap();
        let mut eval = |p: &[f64]| {
            let mut n = net.clone();
            n.params = p.to_vec();
            let (ys, _) = n.forward_sequence(&inputs, &n.zero_hidden()).unwrap();
            loss.loss_and_grad(&ys, &targets).unwrap().0
        };
        let fd = fd_param_grad(&mut eval, &net.params, 1e-4);
        let e = rel_err(&got, &fd);
        assert!(e < 1e-3, "rel err {e}");
    }

    #[test]
    fn bptt_matches_finite_differences_with_initializer() {
        let net = toy_net(4, 3, Activation::Linear, 8);
        let init = InitializerNet::new(5, 6, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = random_rows(&mut rng, 4, 4, 1.0);
        let targets = random_rows(&mut rng, 4, 3, 1.0);
        let obs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = LossKind::MeanSquared;
        let (_, got_net, got_init) =
            chunk_loss_and_grads(&net, Some(&init), &inputs, &targets, Some(&obs), &loss)
                .unwrap();
        let got_init = got_init.unwrap();

        let mut eval_net = |p: &[f64]| {
            let mut n = net.clone();
            n.params = p.to_vec();
            chunk_loss_and_grads(&n, Some(&init), &inputs, &targets, Some(&obs), &loss)
                .unwrap()
                .0
        };
        let fd_net = fd_param_grad(&mut eval_net, &net.params, 1e-4);
        assert!(rel_err(&got_net, &fd_net) < 1e-3);

        let mut eval_init = |p: &[f64]| {
            let mut i2 = init.clone();
            i2.params = p.to_vec();
            chunk_loss_and_grads(&net, Some(&i2), &inputs, &targets, Some(&obs), &loss)
                .unwrap()
                .0
        };
        let fd_init = fd_param_grad(&mut eval_init, &init.params, 1e-4);
        let e = rel_err(&got_init, &fd_init);
        assert!(e < 1e-3, "initializer rel err {e}");
    }

    #[test]
    fn rotation_fk_loss_gradient_matches_finite_differences() {
        let tree = KinematicTree::default_humanoid();
        let joints = tree.joint_count();
        let net = RecurrentNet::new(6, 8, 2, 6 * joints, Activation::Linear, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = random_rows(&mut rng, 3, 6, 1.0);
        // Targets taken from real poses so 6D blocks are valid rotations.
        let targets: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let pose = crate::skeleton::Pose {
                    local: (0..joints)
                        .map(|_| crate::geom::random_rotation(&mut rng))
                        .collect(),
                };
                let mut row = Vec::with_capacity(9 * joints);
                for r in &pose.local {
                    row.extend_from_slice(&crate::geom::rot_to_6d(r).0);
                }
                row.extend_from_slice(&crate::skeleton::fk(&tree, &pose).flatten());
                row
            })
            .collect();
        let loss = LossKind::RotationFk {
            tree: tree.clone(),
            lambda_rot: 1.0,
            lambda_pos: 100.0,
        };
        let (_, got, _) =
            chunk_loss_and_grads(&net, None, &inputs, &targets, None, &loss).unwrap();
        let mut eval = |p: &[f64]| {
            let mut n = net.clone();
            n.params = p.to_vec();
            let (ys, _) = n.forward_sequence(&inputs, &n.zero_hidden()).unwrap();
            loss.loss_and_grad(&ys, &targets).unwrap().0
        };
        let fd = fd_param_grad(&mut eval, &net.params, 1e-4);
        let e = rel_err(&got, &fd);
        assert!(e < 1e-3, "rel err {e}");
    }

    fn copy_task(seed: u64) -> Vec<TrainSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| {
                let rows = random_rows(&mut rng, 20, 4, 1.0);
                TrainSequence {
                    inputs: rows.clone(),
                    targets: rows,
                    init_obs: None,
                }
            })
            .collect()
    }

    #[test]
    fn training_halves_copy_task_loss() {
        let data = copy_task(100);
        let mut net = toy_net(4, 4, Activation::Linear, 13);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 4,
            chunk_len: 16,
            epochs: 30,
            seed: 1,
            grad_clip: 1.0,
        };
        let report = train(&mut net, None, &data, &LossKind::MeanSquared, &cfg).unwrap();
        let first = report.losses[0];
        let last = *report.losses.last().unwrap();
        assert!(
            last <= 0.5 * first,
            "loss went {first} -> {last} over {} epochs",
            cfg.epochs
        );
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = copy_task(101);
        let mut net = toy_net(4, 4, Activation::Linear, 14);
        let before = net.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&mut net, None, &data, &LossKind::MeanSquared, &cfg).unwrap();
        assert_eq!(net.params, before);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let data = copy_task(102);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = toy_net(4, 4, Activation::Linear, 15);
            train(&mut net, None, &data, &LossKind::MeanSquared, &cfg)
                .unwrap()
                .losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = copy_task(103);
        data[0].targets[3][1] = f64::NAN;
        let mut net = toy_net(4, 4, Activation::Linear, 16);
        let cfg = TrainConfig::default();
        let err = train(&mut net, None, &data, &LossKind::MeanSquared, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
    }

    #[test]
    fn runner_hidden_round_trip() {
        let net = toy_net(6, 3, Activation::Linear, 17);
        let mut runner = NetRunner::new(net);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let xs = random_rows(&mut rng, 6, 6, 1.0);
        for x in &xs[..3] {
            runner.step(x).unwrap();
        }
        let saved = runner.get_hidden().clone();
        let peeked = runner.peek(&xs[3]).unwrap();
        assert_eq!(runner.get_hidden(), &saved);
        let stepped = runner.step(&xs[3]).unwrap();
        assert_eq!(peeked, stepped);
        assert_ne!(runner.get_hidden(), &saved);
        runner.set_hidden(saved.clone()).unwrap();
        assert_eq!(runner.get_hidden(), &saved);
        assert!(runner
            .set_hidden(HiddenState::zeros(1, 3))
            .is_err());
    }

    #[test]
    fn initializer_output_is_bounded() {
        let init = InitializerNet::new(10, 16, 16, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = init.forward(&x).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1.0));
        let net = RecurrentNet::new(4, 8, 2, 2, Activation::Linear, 21);
        let h = init.hidden_for(&x, &net).unwrap();
        assert_eq!(h.layers.len(), 2);
        assert_eq!(h.layers[0].len(), 8);
    }
}
