//! The phase prediction network.
//!
//! A residual convolutional trunk followed by the parallel estimation head:
//!
//! ```text
//! log A (F × N)
//!   └─ conv k7 → C channels
//!        ├─ RCBlock(k=3) ─┐
//!        ├─ RCBlock(k=7) ─┼─ sum / 3 → LReLU
//!        └─ RCBlock(k=11)─┘        ├─ conv k7 → N  (pseudo real  R̂)
//!                                  └─ conv k7 → N  (pseudo imag  Î)
//!                                        P̂ = φ(R̂, Î)
//! ```
//!
//! Each RCBlock is three sub-blocks `x + conv_k(LReLU(conv_{k,d}(LReLU(x))))`
//! with dilations 1, 3, 5 on the first convolution. All convolutions run
//! along the frame axis with frequency bins as channels and keep the frame
//! count. With the parallel head disabled a single `conv k7 → N` emits the
//! phase directly and nothing bounds its range.

mod conv;

pub use conv::Conv1d;

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{Array2, ArrayView2, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phasemath;
use crate::spectral::PhaseSpectrogram;

/// Floating-point type the network can run in. `f32` for training and
/// inference, `f64` for gradient checks.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + AddAssign + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Standard deviation of the normal kernel initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_bins: usize,
    pub trunk_channels: usize,
    pub pre_kernel: usize,
    pub block_kernels: Vec<usize>,
    pub sub_block_dilations: Vec<usize>,
    pub output_kernel: usize,
    pub lrelu_slope: f64,
    pub use_parallel_estimation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_bins: 513,
            trunk_channels: 512,
            pre_kernel: 7,
            block_kernels: vec![3, 7, 11],
            sub_block_dilations: vec![1, 3, 5],
            output_kernel: 7,
            lrelu_slope: 0.1,
            use_parallel_estimation: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_bins == 0 || self.trunk_channels == 0 {
            return bad("input_bins and trunk_channels must be positive".into());
        }
        if self.block_kernels.is_empty() || self.sub_block_dilations.is_empty() {
            return bad("need at least one block kernel and one dilation".into());
        }
        let kernels = [self.pre_kernel, self.output_kernel]
            .into_iter()
            .chain(self.block_kernels.iter().copied());
        for k in kernels {
            if k % 2 == 0 {
                return bad(format!("kernel size {k} is not odd"));
            }
        }
        if self.sub_block_dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !(self.lrelu_slope.is_finite() && self.lrelu_slope >= 0.0) {
            return bad(format!("invalid LReLU slope {}", self.lrelu_slope));
        }
        Ok(())
    }

    /// Number of frames on either side of an output frame that can influence it.
    pub fn receptive_radius(&self) -> usize {
        let trunk = self
            .block_kernels
            .iter()
            .map(|k| {
                let half = (k - 1) / 2;
                self.sub_block_dilations.iter().map(|d| half * d + half).sum::<usize>()
            })
            .max()
            .unwrap_or(0);
        (self.pre_kernel - 1) / 2 + trunk + (self.output_kernel - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBlock<T> {
    pub dilated: Conv1d<T>,
    pub plain: Conv1d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Parallel { real: Conv1d<T>, imag: Conv1d<T> },
    Linear(Conv1d<T>),
}

/// Learned weights. The same shape doubles as a gradient or moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub pre: Conv1d<T>,
    pub blocks: Vec<Vec<SubBlock<T>>>,
    pub head: Head<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.trunk_channels;
        let n = cfg.input_bins;
        let blocks = cfg
            .block_kernels
            .iter()
            .map(|&k| {
                cfg.sub_block_dilations
                    .iter()
                    .map(|&d| SubBlock {
                        dilated: Conv1d::zeros(k, c, c, d),
                        plain: Conv1d::zeros(k, c, c, 1),
                    })
                    .collect()
            })
            .collect();
        let out = || Conv1d::zeros(cfg.output_kernel, c, n, 1);
        Self {
            pre: Conv1d::zeros(cfg.pre_kernel, n, c, 1),
            blocks,
            head: if cfg.use_parallel_estimation {
                Head::Parallel {
                    real: out(),
                    imag: out(),
                }
            } else {
                Head::Linear(out())
            },
        }
    }

    /// Every convolution with its stable name, in a fixed order.
    pub fn convs(&self) -> Vec<(String, &Conv1d<T>)> {
        let mut v = vec![("pre".to_string(), &self.pre)];
        for (b, block) in self.blocks.iter().enumerate() {
            for (s, sub) in block.iter().enumerate() {
                v.push((format!("blocks.{b}.{s}.dilated"), &sub.dilated));
                v.push((format!("blocks.{b}.{s}.plain"), &sub.plain));
            }
        }
        match &self.head {
            Head::Parallel { real, imag } => {
                v.push(("head.real".into(), real));
                v.push(("head.imag".into(), imag));
            }
            Head::Linear(c) => v.push(("head.linear".into(), c)),
        }
        v
    }

    pub fn convs_mut(&mut self) -> Vec<(String, &mut Conv1d<T>)> {
        let mut v = vec![("pre".to_string(), &mut self.pre)];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (s, sub) in block.iter_mut().enumerate() {
                v.push((format!("blocks.{b}.{s}.dilated"), &mut sub.dilated));
                v.push((format!("blocks.{b}.{s}.plain"), &mut sub.plain));
            }
        }
        match &mut self.head {
            Head::Parallel { real, imag } => {
                v.push(("head.real".into(), real));
                v.push(("head.imag".into(), imag));
            }
            Head::Linear(c) => v.push(("head.linear".into(), c)),
        }
        v
    }

    /// Flat `(name, values)` views over every tensor, weights before biases.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (name, c) in self.convs() {
            out.push((
                format!("{name}.weight"),
                c.weight.shape().to_vec(),
                c.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                c.bias.shape().to_vec(),
                c.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (name, c) in self.convs_mut() {
            let Conv1d { weight, bias, .. } = c;
            out.push((format!("{name}.weight"), weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |c: &Conv1d<T>| Conv1d {
            weight: c.weight.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            bias: c.bias.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            dilation: c.dilation,
        };
        ModelParams {
            pre: conv(&self.pre),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|s| SubBlock {
                            dilated: conv(&s.dilated),
                            plain: conv(&s.plain),
                        })
                        .collect()
                })
                .collect(),
            head: match &self.head {
                Head::Parallel { real, imag } => Head::Parallel {
                    real: conv(real),
                    imag: conv(imag),
                },
                Head::Linear(c) => Head::Linear(conv(c)),
            },
        }
    }
}

/// Deterministic initialization: kernels `N(0, 0.01²)` drawn in
/// [`ModelParams::convs`] order from a ChaCha8 stream, biases zero.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for (_, conv) in params.convs_mut() {
        conv.weight
            .iter_mut()
            .for_each(|w| *w = T::from_f64(normal.sample(&mut rng)).unwrap());
    }
    Ok(params)
}

/// Raw network output for one utterance.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// Predicted phase. Inside `(-π, π]` with the parallel head; unbounded
    /// for the linear ablation head.
    pub phase: Array2<f64>,
    pub pseudo_real: Option<Array2<T>>,
    pub pseudo_imag: Option<Array2<T>>,
}

impl<T> ModelOutput<T> {
    /// The prediction as a wrapped phase spectrogram. Only the ablation head
    /// needs actual wrapping; `e^{jP}` is unchanged by it.
    pub fn wrapped_phase(&self) -> PhaseSpectrogram {
        PhaseSpectrogram::wrapped(self.phase.clone())
    }
}

struct SubCache<T> {
    input: Array2<T>,
    mid: Array2<T>,
}

/// Activations kept from a training forward pass.
pub struct ForwardCache<T> {
    input: Array2<T>,
    subs: Vec<Vec<SubCache<T>>>,
    summed: Array2<T>,
    trunk: Array2<T>,
    head_out: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::<T>::zeros(&config);
        let shapes = |p: &ModelParams<T>| {
            p.tensors()
                .into_iter()
                .map(|(n, s, _)| (n, s))
                .collect::<Vec<_>>()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::Incompatible(
                "parameter shapes do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn slope(&self) -> T {
        T::from_f64(self.config.lrelu_slope).unwrap()
    }

    fn lrelu(&self, x: &Array2<T>) -> Array2<T> {
        let a = self.slope();
        x.mapv(|v| if v > T::zero() { v } else { v * a })
    }

    /// `dy · LReLU'(x)`, in place on `dy`.
    fn lrelu_back(&self, x: &Array2<T>, dy: &mut Array2<T>) {
        let a = self.slope();
        Zip::from(dy).and(x).for_each(|d, &v| {
            if v <= T::zero() {
                *d = *d * a;
            }
        });
    }

    fn check_input(&self, log_amp: ArrayView2<f64>) -> Result<Array2<T>> {
        if log_amp.ncols() != self.config.input_bins {
            return Err(Error::shape(
                format!("{} input bins", self.config.input_bins),
                format!("{} bins", log_amp.ncols()),
            ));
        }
        if log_amp.nrows() == 0 {
            return Err(Error::Empty("no frames".into()));
        }
        if log_amp.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite log amplitude".into()));
        }
        Ok(log_amp.mapv(|v| T::from_f64(v).unwrap()))
    }

    fn run(&self, input: Array2<T>, keep: bool) -> (ModelOutput<T>, Option<ForwardCache<T>>) {
        let p = &self.params;
        let y0 = p.pre.forward(input.view());
        let mut subs = Vec::new();
        let mut summed: Option<Array2<T>> = None;
        for block in &p.blocks {
            let mut h = y0.clone();
            let mut caches = Vec::new();
            for sub in block {
                let mid = sub.dilated.forward(self.lrelu(&h).view());
                let out = sub.plain.forward(self.lrelu(&mid).view());
                let next = &h + &out;
                if keep {
                    caches.push(SubCache { input: h, mid });
                }
                h = next;
            }
            subs.push(caches);
            summed = Some(match summed {
                None => h,
                Some(acc) => acc + &h,
            });
        }
        let scale = T::from_usize(p.blocks.len()).unwrap().recip();
        let summed = summed.expect("at least one block") * scale;
        let trunk = self.lrelu(&summed);
        let (output, head_out) = match &p.head {
            Head::Parallel { real, imag } => {
                let r = real.forward(trunk.view());
                let i = imag.forward(trunk.view());
                let phase = Zip::from(&r)
                    .and(&i)
                    .map_collect(|a, b| phasemath::phi(a.to_f64().unwrap(), b.to_f64().unwrap()));
                let head_out = if keep { vec![r.clone(), i.clone()] } else { vec![] };
                (
                    ModelOutput {
                        phase,
                        pseudo_real: Some(r),
                        pseudo_imag: Some(i),
                    },
                    head_out,
                )
            }
            Head::Linear(c) => {
                let out = c.forward(trunk.view());
                (
                    ModelOutput {
                        phase: out.mapv(|v| v.to_f64().unwrap()),
                        pseudo_real: None,
                        pseudo_imag: None,
                    },
                    vec![],
                )
            }
        };
        let cache = keep.then(|| ForwardCache {
            input,
            subs,
            summed,
            trunk,
            head_out,
        });
        (output, cache)
    }

    /// Residual convolutional trunk only: `F × N → F × C`.
    pub fn trunk(&self, log_amp: ArrayView2<f64>) -> Result<Array2<T>> {
        let input = self.check_input(log_amp)?;
        let (_, cache) = self.run(input, true);
        Ok(cache.expect("kept").trunk)
    }

    pub fn forward(&self, log_amp: ArrayView2<f64>) -> Result<ModelOutput<T>> {
        let input = self.check_input(log_amp)?;
        Ok(self.run(input, false).0)
    }

    /// Predicted wrapped phase spectrogram.
    pub fn predict_phase(&self, log_amp: ArrayView2<f64>) -> Result<PhaseSpectrogram> {
        Ok(self.forward(log_amp)?.wrapped_phase())
    }

    pub fn forward_train(&self, log_amp: ArrayView2<f64>) -> Result<(ModelOutput<T>, ForwardCache<T>)> {
        let input = self.check_input(log_amp)?;
        let (out, cache) = self.run(input, true);
        Ok((out, cache.expect("kept")))
    }

    /// Backpropagates `d_phase = ∂L/∂P̂` and accumulates into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_phase: ArrayView2<f64>, grads: &mut ModelParams<T>) {
        let p = &self.params;
        let mut d_trunk = match (&p.head, &mut grads.head) {
            (Head::Parallel { real, imag }, Head::Parallel { real: gr, imag: gi }) => {
                let (r, i) = (&cache.head_out[0], &cache.head_out[1]);
                let mut dr = Array2::zeros(r.raw_dim());
                let mut di = Array2::zeros(i.raw_dim());
                Zip::from(&mut dr)
                    .and(&mut di)
                    .and(r)
                    .and(i)
                    .and(d_phase)
                    .for_each(|dr, di, &r, &i, &dp| {
                        let (gr, gi) = phasemath::phi_grad(r.to_f64().unwrap(), i.to_f64().unwrap());
                        *dr = T::from_f64(dp * gr).unwrap();
                        *di = T::from_f64(dp * gi).unwrap();
                    });
                let a = real.backward(cache.trunk.view(), dr.view(), gr, true).unwrap();
                let b = imag.backward(cache.trunk.view(), di.view(), gi, true).unwrap();
                a + &b
            }
            (Head::Linear(c), Head::Linear(g)) => {
                let d = d_phase.mapv(|v| T::from_f64(v).unwrap());
                c.backward(cache.trunk.view(), d.view(), g, true).unwrap()
            }
            _ => panic!("gradient buffer head does not match the model"),
        };
        self.lrelu_back(&cache.summed, &mut d_trunk);
        let d_block = d_trunk * T::from_usize(p.blocks.len()).unwrap().recip();
        let mut d_pre: Option<Array2<T>> = None;
        for ((block, gblock), caches) in p.blocks.iter().zip(&mut grads.blocks).zip(&cache.subs) {
            let mut d = d_block.clone();
            for ((sub, gsub), c) in block.iter().zip(gblock.iter_mut()).zip(caches).rev() {
                let mut d_mid = sub
                    .plain
                    .backward(self.lrelu(&c.mid).view(), d.view(), &mut gsub.plain, true)
                    .unwrap();
                self.lrelu_back(&c.mid, &mut d_mid);
                let mut d_in = sub
                    .dilated
                    .backward(self.lrelu(&c.input).view(), d_mid.view(), &mut gsub.dilated, true)
                    .unwrap();
                self.lrelu_back(&c.input, &mut d_in);
                d += &d_in;
            }
            d_pre = Some(match d_pre {
                None => d,
                Some(acc) => acc + &d,
            });
        }
        p.pre.backward(
            cache.input.view(),
            d_pre.expect("at least one block").view(),
            &mut grads.pre,
            false,
        );
    }
}
