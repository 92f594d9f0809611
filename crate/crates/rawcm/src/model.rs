//! The anti-spoofing network: fixed sinc front-end, residual blocks with
//! filter-wise feature map scaling (FMS), GRU aggregation, two-class output.
//!
//! Layer stack for the full-size preset on a 64000-sample input:
//!
//! ```text
//! [1,64000] -> sinc conv(129) + maxpool(3) + BN + LeakyReLU -> [128,21290]
//!           -> 2 residual blocks @128                       -> [128,2365]
//!           -> 4 residual blocks @512                       -> [512,29]
//!           -> GRU(1024) -> FC(1024) -> output               -> [2]
//! ```
//!
//! Residual blocks are pre-activation (BN, LeakyReLU, Conv, BN, LeakyReLU,
//! Conv) with "same" padding on the 3-tap convolutions so only Maxpool(3)
//! changes the sequence length; a 1x1 projection aligns the skip path when
//! the channel count changes. Class index 0 is bona fide, 1 is spoof.

use crate::error::{Error, Result};
use crate::sinc::{frontend_forward, ScaleKind, SincFilterbank};
use crate::tensor::{log_softmax, BnState, GruVars, Mode, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything that determines the network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: ScaleKind,
    pub sample_rate: f64,
    pub input_len: usize,
    pub n_sinc_filters: usize,
    pub sinc_kernel_len: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub block1_channels: usize,
    pub block1_count: usize,
    pub block2_channels: usize,
    pub block2_count: usize,
    pub gru_hidden: usize,
    pub fc_dim: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Full-size architecture (4 s of 16 kHz audio, 128 sinc filters,
    /// 2x128 + 4x512 residual blocks, GRU/FC width 1024).
    pub fn paper(scale: ScaleKind) -> Self {
        ModelConfig {
            scale,
            sample_rate: 16000.0,
            input_len: 64000,
            n_sinc_filters: 128,
            sinc_kernel_len: 129,
            f_min: 30.0,
            f_max: 8000.0 - 100.0,
            block1_channels: 128,
            block1_count: 2,
            block2_channels: 512,
            block2_count: 4,
            gru_hidden: 1024,
            fc_dim: 1024,
            n_classes: 2,
            leaky_slope: 0.3,
        }
    }

    /// Shrunk preset for gradient checks and fast end-to-end runs: at most 8
    /// channels anywhere, 4000-sample inputs, and one 8->4 plus one 4->8
    /// channel change so both projection directions are exercised.
    pub fn desk(scale: ScaleKind) -> Self {
        ModelConfig {
            scale,
            sample_rate: 16000.0,
            input_len: 4000,
            n_sinc_filters: 8,
            sinc_kernel_len: 33,
            f_min: 30.0,
            f_max: 8000.0 - 100.0,
            block1_channels: 4,
            block1_count: 1,
            block2_channels: 8,
            block2_count: 2,
            gru_hidden: 8,
            fc_dim: 8,
            n_classes: 2,
            leaky_slope: 0.3,
        }
    }

    pub fn preset(name: &str, scale: ScaleKind) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(scale)),
            "desk" => Ok(Self::desk(scale)),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected paper or desk)"
            ))),
        }
    }

    /// Canonical serialized form, used for checkpoint compatibility hashes.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Batch-norm parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct BnParams<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub state: BnState<F>,
}

impl<F: Scalar> BnParams<F> {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor {
                shape: vec![channels],
                data: vec![F::one(); channels],
            },
            beta: Tensor::zeros(vec![channels]),
            state: BnState::new(channels),
        }
    }
}

/// Filter-wise feature map scaling head of one residual block.
#[derive(Debug, Clone)]
pub struct FmsParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// One pre-activation residual block.
#[derive(Debug, Clone)]
pub struct ResBlockParams<F: Scalar> {
    pub bn1: BnParams<F>,
    pub conv1: Tensor<F>,
    pub bn2: BnParams<F>,
    pub conv2: Tensor<F>,
    /// 1x1 projection on the skip path, present iff in/out channels differ.
    pub proj: Option<Tensor<F>>,
    pub fms: FmsParams<F>,
}

/// GRU weights: update (z), reset (r), candidate (n) gates.
#[derive(Debug, Clone)]
pub struct GruParams<F: Scalar> {
    pub wz: Tensor<F>,
    pub uz: Tensor<F>,
    pub bz: Tensor<F>,
    pub wr: Tensor<F>,
    pub ur: Tensor<F>,
    pub br: Tensor<F>,
    pub wn: Tensor<F>,
    pub un: Tensor<F>,
    pub bn: Tensor<F>,
}

/// Full parameter set. The sinc bank is part of the model but is fixed; it
/// never appears in [`ModelParams::trainables_mut`].
#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub bank: SincFilterbank,
    pub front_bn: BnParams<F>,
    pub blocks: Vec<ResBlockParams<F>>,
    pub gru: GruParams<F>,
    pub fc_w: Tensor<F>,
    pub fc_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

/// Tape handles for one registration of the parameters.
pub struct ModelVars {
    pub bank_kernels: Var,
    pub front_gamma: Var,
    pub front_beta: Var,
    pub blocks: Vec<BlockVars>,
    pub gru: GruVars,
    pub fc_w: Var,
    pub fc_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

pub struct BlockVars {
    pub bn1_gamma: Var,
    pub bn1_beta: Var,
    pub conv1: Var,
    pub bn2_gamma: Var,
    pub bn2_beta: Var,
    pub conv2: Var,
    pub proj: Option<Var>,
    pub fms_w: Var,
    pub fms_b: Var,
}

/// Output of a forward pass: logits plus the shape trace of every stage.
pub struct Forward {
    pub logits: Var,
    pub trace: Vec<(String, Vec<usize>)>,
}

fn uniform_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor { shape, data }
}

fn conv_init<F: Scalar>(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor<F> {
    let bound = (1.0 / (c_in * k) as f64).sqrt();
    uniform_tensor(rng, vec![c_out, c_in, k], bound)
}

fn mat_init<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let bound = (1.0 / cols as f64).sqrt();
    uniform_tensor(rng, vec![rows, cols], bound)
}

impl<F: Scalar> ModelParams<F> {
    /// Reproducible initialization: fan-in-scaled uniform weights, zero
    /// biases, BN at identity. Same seed, same parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let bank = SincFilterbank::build(
            config.scale,
            config.n_sinc_filters,
            config.sinc_kernel_len,
            config.sample_rate,
            config.f_min,
            config.f_max,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut c_in = config.n_sinc_filters;
        for i in 0..config.block1_count + config.block2_count {
            let c_out = if i < config.block1_count {
                config.block1_channels
            } else {
                config.block2_channels
            };
            let proj = if c_in != c_out {
                Some(conv_init(&mut rng, c_out, c_in, 1))
            } else {
                None
            };
            blocks.push(ResBlockParams {
                bn1: BnParams::new(c_in),
                conv1: conv_init(&mut rng, c_out, c_in, 3),
                bn2: BnParams::new(c_out),
                conv2: conv_init(&mut rng, c_out, c_out, 3),
                proj,
                fms: FmsParams {
                    weight: mat_init(&mut rng, c_out, c_out),
                    bias: Tensor::zeros(vec![c_out]),
                },
            });
            c_in = c_out;
        }
        let d = config.block2_channels;
        let h = config.gru_hidden;
        let gru = GruParams {
            wz: mat_init(&mut rng, h, d),
            uz: mat_init(&mut rng, h, h),
            bz: Tensor::zeros(vec![h]),
            wr: mat_init(&mut rng, h, d),
            ur: mat_init(&mut rng, h, h),
            br: Tensor::zeros(vec![h]),
            wn: mat_init(&mut rng, h, d),
            un: mat_init(&mut rng, h, h),
            bn: Tensor::zeros(vec![h]),
        };
        Ok(ModelParams {
            front_bn: BnParams::new(config.n_sinc_filters),
            fc_w: mat_init(&mut rng, config.fc_dim, h),
            fc_b: Tensor::zeros(vec![config.fc_dim]),
            out_w: mat_init(&mut rng, config.n_classes, config.fc_dim),
            out_b: Tensor::zeros(vec![config.n_classes]),
            gru,
            blocks,
            bank,
            config,
        })
    }

    /// Register every parameter on `tape`. Trainable tensors become trainable
    /// leaves; the sinc kernels are registered fixed.
    pub fn register(&self, tape: &mut Tape<F>) -> ModelVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                bn1_gamma: tape.leaf(b.bn1.gamma.clone(), true),
                bn1_beta: tape.leaf(b.bn1.beta.clone(), true),
                conv1: tape.leaf(b.conv1.clone(), true),
                bn2_gamma: tape.leaf(b.bn2.gamma.clone(), true),
                bn2_beta: tape.leaf(b.bn2.beta.clone(), true),
                conv2: tape.leaf(b.conv2.clone(), true),
                proj: b.proj.as_ref().map(|p| tape.leaf(p.clone(), true)),
                fms_w: tape.leaf(b.fms.weight.clone(), true),
                fms_b: tape.leaf(b.fms.bias.clone(), true),
            })
            .collect();
        ModelVars {
            bank_kernels: tape.leaf(self.bank.kernels_as::<F>(), false),
            front_gamma: tape.leaf(self.front_bn.gamma.clone(), true),
            front_beta: tape.leaf(self.front_bn.beta.clone(), true),
            blocks,
            gru: GruVars {
                wz: tape.leaf(self.gru.wz.clone(), true),
                uz: tape.leaf(self.gru.uz.clone(), true),
                bz: tape.leaf(self.gru.bz.clone(), true),
                wr: tape.leaf(self.gru.wr.clone(), true),
                ur: tape.leaf(self.gru.ur.clone(), true),
                br: tape.leaf(self.gru.br.clone(), true),
                wn: tape.leaf(self.gru.wn.clone(), true),
                un: tape.leaf(self.gru.un.clone(), true),
                bn: tape.leaf(self.gru.bn.clone(), true),
            },
            fc_w: tape.leaf(self.fc_w.clone(), true),
            fc_b: tape.leaf(self.fc_b.clone(), true),
            out_w: tape.leaf(self.out_w.clone(), true),
            out_b: tape.leaf(self.out_b.clone(), true),
        }
    }

    /// Forward pass using already-registered parameter vars. Train mode
    /// updates the BN running statistics.
    pub fn forward_registered(
        &mut self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        waveform: &Tensor<F>,
        mode: Mode,
    ) -> Result<Forward> {
        let slope = F::from_f64(self.config.leaky_slope);
        let mut trace = Vec::new();
        let input = tape.leaf(waveform.clone(), false);
        let shape = &tape.value(input).shape;
        if shape.len() != 2 || shape[0] != 1 || shape[1] != self.config.input_len {
            return Err(Error::Shape(format!(
                "model expects input [1, {}], got {shape:?}",
                self.config.input_len
            )));
        }
        let mut x = {
            let conv = tape.conv1d(input, vars.bank_kernels, 1)?;
            let pooled = tape.maxpool1d(conv, 3)?;
            let normed = tape.batch_norm(
                pooled,
                vars.front_gamma,
                vars.front_beta,
                &mut self.front_bn.state,
                mode,
            )?;
            tape.leaky_relu(normed, slope)
        };
        trace.push(("frontend".into(), tape.value(x).shape.clone()));
        for (i, (block, bvars)) in self.blocks.iter_mut().zip(&vars.blocks).enumerate() {
            x = res_block_forward(tape, x, block, bvars, slope, mode)?;
            trace.push((format!("res_block_{}", i + 1), tape.value(x).shape.clone()));
        }
        let h = tape.gru_sequence(x, &vars.gru)?;
        trace.push(("gru".into(), tape.value(h).shape.clone()));
        let fc = tape.linear(h, vars.fc_w, vars.fc_b)?;
        trace.push(("fc".into(), tape.value(fc).shape.clone()));
        let logits = tape.linear(fc, vars.out_w, vars.out_b)?;
        trace.push(("logits".into(), tape.value(logits).shape.clone()));
        Ok(Forward { logits, trace })
    }

    /// One-shot forward on a fresh registration.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        waveform: &Tensor<F>,
        mode: Mode,
    ) -> Result<(Forward, ModelVars)> {
        let vars = self.register(tape);
        let fwd = self.forward_registered(tape, &vars, waveform, mode)?;
        Ok((fwd, vars))
    }

    /// Eval-mode logits without touching any state.
    pub fn eval_logits(&self, waveform: &Tensor<F>) -> Result<Vec<F>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let (fwd, _) = scratch.forward(&mut tape, waveform, Mode::Eval)?;
        Ok(tape.value(fwd.logits).data.clone())
    }

    /// Countermeasure score: log-likelihood ratio of bona fide vs spoof from
    /// the softmax output. Higher means more bona fide.
    pub fn predict_score(&self, waveform: &Tensor<F>) -> Result<f64> {
        let logits = self.eval_logits(waveform)?;
        Ok(score_from_logits(&logits))
    }

    /// Trainable tensors in a fixed traversal order (matches
    /// [`ModelVars::trainable_vars`]). The sinc bank is excluded.
    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.front_bn.gamma, &mut self.front_bn.beta];
        for b in &mut self.blocks {
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.conv1);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            out.push(&mut b.conv2);
            if let Some(p) = b.proj.as_mut() {
                out.push(p);
            }
            out.push(&mut b.fms.weight);
            out.push(&mut b.fms.bias);
        }
        out.push(&mut self.gru.wz);
        out.push(&mut self.gru.uz);
        out.push(&mut self.gru.bz);
        out.push(&mut self.gru.wr);
        out.push(&mut self.gru.ur);
        out.push(&mut self.gru.br);
        out.push(&mut self.gru.wn);
        out.push(&mut self.gru.un);
        out.push(&mut self.gru.bn);
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn trainables(&self) -> Vec<&Tensor<F>> {
        let mut out: Vec<&Tensor<F>> = vec![&self.front_bn.gamma, &self.front_bn.beta];
        for b in &self.blocks {
            out.push(&b.bn1.gamma);
            out.push(&b.bn1.beta);
            out.push(&b.conv1);
            out.push(&b.bn2.gamma);
            out.push(&b.bn2.beta);
            out.push(&b.conv2);
            if let Some(p) = b.proj.as_ref() {
                out.push(p);
            }
            out.push(&b.fms.weight);
            out.push(&b.fms.bias);
        }
        out.push(&self.gru.wz);
        out.push(&self.gru.uz);
        out.push(&self.gru.bz);
        out.push(&self.gru.wr);
        out.push(&self.gru.ur);
        out.push(&self.gru.br);
        out.push(&self.gru.wn);
        out.push(&self.gru.un);
        out.push(&self.gru.bn);
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.trainables().iter().map(|t| t.numel()).sum()
    }
}

impl ModelVars {
    /// Trainable vars in the same order as [`ModelParams::trainables_mut`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = vec![self.front_gamma, self.front_beta];
        for b in &self.blocks {
            out.push(b.bn1_gamma);
            out.push(b.bn1_beta);
            out.push(b.conv1);
            out.push(b.bn2_gamma);
            out.push(b.bn2_beta);
            out.push(b.conv2);
            if let Some(p) = b.proj {
                out.push(p);
            }
            out.push(b.fms_w);
            out.push(b.fms_b);
        }
        out.push(self.gru.wz);
        out.push(self.gru.uz);
        out.push(self.gru.bz);
        out.push(self.gru.wr);
        out.push(self.gru.ur);
        out.push(self.gru.br);
        out.push(self.gru.wn);
        out.push(self.gru.un);
        out.push(self.gru.bn);
        out.push(self.fc_w);
        out.push(self.fc_b);
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}

/// FMS: per-channel sigmoid gate from time-averaged features, applied both
/// multiplicatively and additively (y = x*s + s).
pub fn fms_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let m = tape.mean_over_time(x)?;
    let lin = tape.linear(m, weight, bias)?;
    let s = tape.sigmoid(lin);
    tape.channel_gate(x, s)
}

/// One residual block: pre-activation body added to the (possibly projected)
/// skip path, then Maxpool(3), then FMS.
pub fn res_block_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    params: &mut ResBlockParams<F>,
    vars: &BlockVars,
    slope: F,
    mode: Mode,
) -> Result<Var> {
    let t = tape.batch_norm(x, vars.bn1_gamma, vars.bn1_beta, &mut params.bn1.state, mode)?;
    let t = tape.leaky_relu(t, slope);
    let t = tape.conv1d_padded(t, vars.conv1, 1, 1)?;
    let t = tape.batch_norm(t, vars.bn2_gamma, vars.bn2_beta, &mut params.bn2.state, mode)?;
    let t = tape.leaky_relu(t, slope);
    let t = tape.conv1d_padded(t, vars.conv2, 1, 1)?;
    let skip = match vars.proj {
        Some(p) => tape.conv1d(x, p, 1)?,
        None => x,
    };
    let summed = tape.add(t, skip)?;
    let pooled = tape.maxpool1d(summed, 3)?;
    fms_forward(tape, pooled, vars.fms_w, vars.fms_b)
}

/// log-softmax(logits)[bona fide] - log-softmax(logits)[spoof]; equals the
/// raw logit difference.
pub fn score_from_logits<F: Scalar>(logits: &[F]) -> f64 {
    let ls = log_softmax(logits);
    (ls[0] - ls[1]).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn fms_zero_parameters_give_half_gate() {
        let mut rng = StdRng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, vec![3, 5]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), false);
        let w = tape.leaf(Tensor::zeros(vec![3, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![3]), false);
        let y = fms_forward(&mut tape, x, w, b).unwrap();
        for (yv, xv) in tape.value(y).data.iter().zip(&x0.data) {
            assert!((yv - (0.5 * xv + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn fms_saturated_bias_approaches_x_plus_one() {
        let mut rng = StdRng::seed_from_u64(2);
        let x0 = rand_tensor(&mut rng, vec![2, 4]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), false);
        let w = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let b = tape.leaf(Tensor::new(vec![2], vec![30.0, 30.0]).unwrap(), false);
        let y = fms_forward(&mut tape, x, w, b).unwrap();
        for (yv, xv) in tape.value(y).data.iter().zip(&x0.data) {
            assert!((yv - (xv + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn fms_gate_strictly_inside_unit_interval() {
        let mut rng = StdRng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, vec![4, 6]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0, false);
        let w = tape.leaf(rand_tensor(&mut rng, vec![4, 4]), false);
        let b = tape.leaf(rand_tensor(&mut rng, vec![4]), false);
        let m = tape.mean_over_time(x).unwrap();
        let lin = tape.linear(m, w, b).unwrap();
        let s = tape.sigmoid(lin);
        for &v in &tape.value(s).data {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn res_block_zero_body_reduces_to_gated_pooled_skip() {
        let mut rng = StdRng::seed_from_u64(4);
        let c = 3;
        let x0 = rand_tensor(&mut rng, vec![c, 9]);
        let mut params = ResBlockParams::<f64> {
            bn1: BnParams::new(c),
            conv1: rand_tensor(&mut rng, vec![c, c, 3]),
            bn2: BnParams::new(c),
            conv2: Tensor::zeros(vec![c, c, 3]),
            proj: None,
            fms: FmsParams {
                weight: Tensor::zeros(vec![c, c]),
                bias: Tensor::zeros(vec![c]),
            },
        };
        let mut tape = Tape::<f64>::new();
        let vars = BlockVars {
            bn1_gamma: tape.leaf(params.bn1.gamma.clone(), false),
            bn1_beta: tape.leaf(params.bn1.beta.clone(), false),
            conv1: tape.leaf(params.conv1.clone(), false),
            bn2_gamma: tape.leaf(params.bn2.gamma.clone(), false),
            bn2_beta: tape.leaf(params.bn2.beta.clone(), false),
            conv2: tape.leaf(params.conv2.clone(), false),
            proj: None,
            fms_w: tape.leaf(params.fms.weight.clone(), false),
            fms_b: tape.leaf(params.fms.bias.clone(), false),
        };
        let x = tape.leaf(x0.clone(), false);
        let y = res_block_forward(&mut tape, x, &mut params, &vars, 0.3, Mode::Train).unwrap();
        // body is zero, FMS gate is 0.5: expect 0.5*maxpool(x) + 0.5
        let out = tape.value(y);
        assert_eq!(out.shape, vec![c, 3]);
        for ci in 0..c {
            for j in 0..3 {
                let m = x0.data[ci * 9 + j * 3..ci * 9 + j * 3 + 3]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let got = out.data[ci * 3 + j];
                assert!((got - (0.5 * m + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn res_block_rejects_too_short_input() {
        let mut params = ResBlockParams::<f64> {
            bn1: BnParams::new(1),
            conv1: Tensor::zeros(vec![1, 1, 3]),
            bn2: BnParams::new(1),
            conv2: Tensor::zeros(vec![1, 1, 3]),
            proj: None,
            fms: FmsParams {
                weight: Tensor::zeros(vec![1, 1]),
                bias: Tensor::zeros(vec![1]),
            },
        };
        let mut tape = Tape::<f64>::new();
        let vars = BlockVars {
            bn1_gamma: tape.leaf(params.bn1.gamma.clone(), false),
            bn1_beta: tape.leaf(params.bn1.beta.clone(), false),
            conv1: tape.leaf(params.conv1.clone(), false),
            bn2_gamma: tape.leaf(params.bn2.gamma.clone(), false),
            bn2_beta: tape.leaf(params.bn2.beta.clone(), false),
            conv2: tape.leaf(params.conv2.clone(), false),
            proj: None,
            fms_w: tape.leaf(params.fms.weight.clone(), false),
            fms_b: tape.leaf(params.fms.bias.clone(), false),
        };
        let x = tape.leaf(Tensor::zeros(vec![1, 2]), false);
        assert!(res_block_forward(&mut tape, x, &mut params, &vars, 0.3, Mode::Train).is_err());
    }

    #[test]
    fn block_length_chain_matches_published_shapes() {
        // channel count does not affect lengths; use 2 channels for speed
        let mk_block = |c: usize| ResBlockParams::<f64> {
            bn1: BnParams::new(c),
            conv1: Tensor::zeros(vec![c, c, 3]),
            bn2: BnParams::new(c),
            conv2: Tensor::zeros(vec![c, c, 3]),
            proj: None,
            fms: FmsParams {
                weight: Tensor::zeros(vec![c, c]),
                bias: Tensor::zeros(vec![c]),
            },
        };
        let mut t = 21290usize;
        for _ in 0..2 {
            let mut params = mk_block(2);
            let mut tape = Tape::<f64>::new();
            let vars = BlockVars {
                bn1_gamma: tape.leaf(params.bn1.gamma.clone(), false),
                bn1_beta: tape.leaf(params.bn1.beta.clone(), false),
                conv1: tape.leaf(params.conv1.clone(), false),
                bn2_gamma: tape.leaf(params.bn2.gamma.clone(), false),
                bn2_beta: tape.leaf(params.bn2.beta.clone(), false),
                conv2: tape.leaf(params.conv2.clone(), false),
                proj: None,
                fms_w: tape.leaf(params.fms.weight.clone(), false),
                fms_b: tape.leaf(params.fms.bias.clone(), false),
            };
            let x = tape.leaf(Tensor::zeros(vec![2, t]), false);
            let y = res_block_forward(&mut tape, x, &mut params, &vars, 0.3, Mode::Train).unwrap();
            t = tape.value(y).shape[1];
        }
        assert_eq!(t, 2365);
        for _ in 0..4 {
            let mut params = mk_block(2);
            let mut tape = Tape::<f64>::new();
            let vars = BlockVars {
                bn1_gamma: tape.leaf(params.bn1.gamma.clone(), false),
                bn1_beta: tape.leaf(params.bn1.beta.clone(), false),
                conv1: tape.leaf(params.conv1.clone(), false),
                bn2_gamma: tape.leaf(params.bn2.gamma.clone(), false),
                bn2_beta: tape.leaf(params.bn2.beta.clone(), false),
                conv2: tape.leaf(params.conv2.clone(), false),
                proj: None,
                fms_w: tape.leaf(params.fms.weight.clone(), false),
                fms_b: tape.leaf(params.fms.bias.clone(), false),
            };
            let x = tape.leaf(Tensor::zeros(vec![2, t]), false);
            let y = res_block_forward(&mut tape, x, &mut params, &vars, 0.3, Mode::Train).unwrap();
            t = tape.value(y).shape[1];
        }
        assert_eq!(t, 29);
    }

    #[test]
    fn desk_forward_trace_and_determinism() {
        let cfg = ModelConfig::desk(ScaleKind::Mel);
        let mut m1 = ModelParams::<f32>::init(cfg.clone(), 7).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let wave = Tensor::<f32> {
            shape: vec![1, cfg.input_len],
            data: (0..cfg.input_len)
                .map(|_| rng.gen_range(-0.5f32..0.5))
                .collect(),
        };
        let mut tape = Tape::new();
        let (fwd, _) = m1.forward(&mut tape, &wave, Mode::Eval).unwrap();
        assert_eq!(tape.value(fwd.logits).shape, vec![2]);
        // 4000 -> 3968 -> 1322 | 440 | 146 | 48
        assert_eq!(fwd.trace[0], ("frontend".to_string(), vec![8, 1322]));
        assert_eq!(fwd.trace[1], ("res_block_1".to_string(), vec![4, 440]));
        assert_eq!(fwd.trace[3], ("res_block_3".to_string(), vec![8, 48]));

        let l1 = m1.eval_logits(&wave).unwrap();
        let l2 = m1.eval_logits(&wave).unwrap();
        assert_eq!(l1, l2, "eval forward must be bit-deterministic");
    }

    #[test]
    fn init_is_seed_reproducible() {
        let cfg = ModelConfig::desk(ScaleKind::Linear);
        let a = ModelParams::<f32>::init(cfg.clone(), 42).unwrap();
        let b = ModelParams::<f32>::init(cfg.clone(), 42).unwrap();
        let c = ModelParams::<f32>::init(cfg, 43).unwrap();
        for (ta, tb) in a.trainables().iter().zip(b.trainables()) {
            assert_eq!(ta.data, tb.data);
        }
        let differs = a
            .trainables()
            .iter()
            .zip(c.trainables())
            .any(|(ta, tc)| ta.data != tc.data);
        assert!(differs, "different seeds must differ");
    }

    #[test]
    fn initial_loss_is_near_ln2_on_balanced_batch() {
        let cfg = ModelConfig::desk(ScaleKind::Mel);
        let mut params = ModelParams::<f32>::init(cfg.clone(), 11).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let mut total = 0.0f64;
        for label in [0usize, 1, 0, 1] {
            let wave = Tensor::<f32> {
                shape: vec![1, cfg.input_len],
                data: (0..cfg.input_len)
                    .map(|_| rng.gen_range(-0.5f32..0.5))
                    .collect(),
            };
            let mut tape = Tape::new();
            let (fwd, _) = params.forward(&mut tape, &wave, Mode::Train).unwrap();
            let loss = tape.softmax_cross_entropy(fwd.logits, label).unwrap();
            let v = tape.value(loss).item() as f64;
            assert!(v.is_finite());
            total += v;
        }
        let mean = total / 4.0;
        assert!((mean - std::f64::consts::LN_2).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn score_from_logits_cases() {
        assert_eq!(score_from_logits(&[0.0f64, 0.0]), 0.0);
        assert!((score_from_logits(&[3.0f64, -3.0]) - 6.0).abs() < 1e-12);
        // monotone in the logit gap
        let mut prev = f64::NEG_INFINITY;
        for gap in [-4.0f64, -1.0, 0.0, 0.5, 2.0, 8.0] {
            let s = score_from_logits(&[gap / 2.0, -gap / 2.0]);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let cfg = ModelConfig::desk(ScaleKind::Mel);
        let mut params = ModelParams::<f32>::init(cfg, 1).unwrap();
        let wave = Tensor::<f32>::zeros(vec![1, 123]);
        let mut tape = Tape::new();
        assert!(params.forward(&mut tape, &wave, Mode::Eval).is_err());
    }
}
