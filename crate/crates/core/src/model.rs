//! Siamese branch architectures and their shared-weight composition.
//!
//! Both inputs of a pair run through the same branch in one [`Session`], so
//! every parameter is a single graph leaf and gradients from the two
//! branches accumulate on it. The branch embeddings are merged by
//! subtraction (processed minus unprocessed) and a final dense layer maps
//! the merge vector to `num_para` outputs.

use drc_autodiff::layers::{dropout, max_pool2d, BatchNorm, Conv1d, Conv2d, Dense};
use drc_autodiff::{
    Adadelta, Mode, ParamGrads, ParamStore, PoolMode, Scalar, Session, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Representation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Model1Mel,
    Model1SpecTuned,
    Model2Waveform,
    Model3Multikernel,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Model1Mel,
        Variant::Model1SpecTuned,
        Variant::Model2Waveform,
        Variant::Model3Multikernel,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Model1Mel => "model1_mel",
            Variant::Model1SpecTuned => "model1_spec_tuned",
            Variant::Model2Waveform => "model2_waveform",
            Variant::Model3Multikernel => "model3_multikernel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s.to_ascii_lowercase())
    }

    /// Input representation the variant is designed for.
    pub fn representation(self) -> Representation {
        match self {
            Variant::Model1Mel => Representation::Mel,
            Variant::Model1SpecTuned | Variant::Model3Multikernel => Representation::Spectrogram,
            Variant::Model2Waveform => Representation::Waveform,
        }
    }

    pub fn accepts(self, r: Representation) -> bool {
        match self {
            Variant::Model2Waveform => r == Representation::Waveform,
            _ => r != Representation::Waveform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding: every convolution shrinks its input by `k − 1`.
    Valid,
    /// Zero padding of `k / 2` on each side.
    Same,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => k / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    /// `(frequency, time)`.
    pub kernel: (usize, usize),
    pub filters: usize,
}

/// Height of a timbral kernel relative to the number of frequency bins `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelHeight {
    Fixed(usize),
    /// `F / 2`.
    Half,
    /// `F − n`.
    Minus(usize),
}

impl KernelHeight {
    fn resolve(self, bins: usize) -> usize {
        match self {
            KernelHeight::Fixed(h) => h,
            KernelHeight::Half => bins / 2,
            KernelHeight::Minus(n) => bins.saturating_sub(n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimbralKernel {
    pub height: KernelHeight,
    pub width: usize,
}

/// Declarative branch description. Filter counts are nominal; the built
/// network uses `max(1, round(filters · width))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub variant: Variant,
    pub width: f64,
    pub embedding_dim: usize,
    pub num_para: usize,
    pub dropout: f64,
    pub padding: Padding,
    /// Model 1: one conv → relu → max-pool → dropout block per entry.
    pub conv_blocks: Vec<ConvBlock>,
    pub pool: (usize, usize),
    /// Model 2 front end: one conv1d → batchnorm → relu layer per entry.
    pub front_filters: Vec<usize>,
    pub front_kernel: usize,
    pub front_pool: usize,
    /// Front-end layers followed by a max-pool.
    pub front_pooled: Vec<bool>,
    /// Residual back end shared by Models 2 and 3.
    pub back_channels: usize,
    pub back_kernel: usize,
    /// Model 3 front end.
    pub timbral: Vec<TimbralKernel>,
    pub timbral_filters: usize,
    pub temporal_kernels: Vec<usize>,
    pub temporal_filters: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::for_variant(Variant::Model1Mel, 1)
    }
}

impl ModelSpec {
    pub fn for_variant(variant: Variant, num_para: usize) -> Self {
        let square = |filters| ConvBlock {
            kernel: (3, 3),
            filters,
        };
        Self {
            variant,
            width: 0.5,
            embedding_dim: 50,
            num_para,
            dropout: 0.1,
            padding: match variant {
                Variant::Model1SpecTuned => Padding::Same,
                _ => Padding::Valid,
            },
            conv_blocks: [10, 15, 15, 20, 20].map(square).to_vec(),
            pool: (2, 2),
            front_filters: vec![64, 64, 64, 128, 128, 256, 256],
            front_kernel: 3,
            front_pool: 3,
            front_pooled: vec![false, true, true, true, true, true, true],
            back_channels: 512,
            back_kernel: 7,
            timbral: [
                (KernelHeight::Half, 1),
                (KernelHeight::Half, 3),
                (KernelHeight::Half, 7),
                (KernelHeight::Minus(10), 1),
                (KernelHeight::Minus(10), 3),
                (KernelHeight::Minus(10), 7),
            ]
            .map(|(height, width)| TimbralKernel { height, width })
            .to_vec(),
            timbral_filters: 8,
            temporal_kernels: vec![4, 8, 16, 32],
            temporal_filters: 8,
        }
    }

    /// Model 1 with its last `n` blocks using 1×3 kernels.
    pub fn with_flat_tail(mut self, n: usize) -> Self {
        let len = self.conv_blocks.len();
        for b in self.conv_blocks.iter_mut().skip(len.saturating_sub(n)) {
            b.kernel = (1, 3);
        }
        self
    }

    pub fn scaled(&self, filters: usize) -> usize {
        ((filters as f64 * self.width).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config("model.width", "must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be positive"));
        }
        if !(1..=4).contains(&self.num_para) {
            return Err(Error::config("model.num_para", "must be between 1 and 4"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.front_pooled.len() != self.front_filters.len() {
            return Err(Error::config(
                "model.front_pooled",
                "needs one entry per front-end layer",
            ));
        }
        Ok(())
    }
}

fn conv_len(input: usize, k: usize, pad: usize, layer: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if k == 0 || padded < k {
        return Err(Error::Size(format!(
            "layer `{layer}`: kernel {k} does not fit input of length {input}"
        )));
    }
    Ok(padded - k + 1)
}

fn pool_len(input: usize, w: usize, layer: &str) -> Result<usize> {
    if w == 0 || input < w {
        return Err(Error::Size(format!(
            "layer `{layer}`: pool window {w} does not fit input of length {input}"
        )));
    }
    Ok(input / w)
}

#[derive(Clone, Debug)]
struct ConvBnRelu1d {
    conv: Conv1d,
    bn: BatchNorm,
}

impl ConvBnRelu1d {
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y)?)
    }
}

/// `L1 = f(x)`, `L2 = f(L1)`, `L3 = L1 + L2`, `L4 = f(L3)`, `out = L3 + L4`,
/// where each `f` is conv1d → batchnorm → relu and the skip inputs are
/// centre-cropped to the shorter length.
#[derive(Clone, Debug)]
struct ResidualBackEnd {
    l1: ConvBnRelu1d,
    l2: ConvBnRelu1d,
    l4: ConvBnRelu1d,
}

fn center_crop<T: Scalar>(s: &mut Session<'_, T>, x: Var, len: usize) -> Result<Var> {
    let cur = *s.graph.shape(x).last().expect("rank ≥ 1");
    if cur == len {
        return Ok(x);
    }
    Ok(s.graph.crop_last(x, (cur - len) / 2, len)?)
}

fn add_cropped<T: Scalar>(s: &mut Session<'_, T>, skip: Var, y: Var) -> Result<Var> {
    let len = *s.graph.shape(y).last().expect("rank ≥ 1");
    let skip = center_crop(s, skip, len)?;
    Ok(s.graph.add(skip, y)?)
}

impl ResidualBackEnd {
    fn build(
        store: &mut ParamStore<impl Scalar>,
        spec: &ModelSpec,
        in_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = spec.scaled(spec.back_channels);
        let k = spec.back_kernel;
        let pad = spec.padding.amount(k);
        let mut layer = |name: &str, cin: usize| -> Result<ConvBnRelu1d> {
            Ok(ConvBnRelu1d {
                conv: Conv1d::new(store, &format!("branch.{name}.conv"), cin, c, k, pad, rng)?,
                bn: BatchNorm::new(store, &format!("branch.{name}.bn"), c)?,
            })
        };
        Ok(Self {
            l1: layer("back.l1", in_ch)?,
            l2: layer("back.l2", c)?,
            l4: layer("back.l4", c)?,
        })
    }

    fn out_len(spec: &ModelSpec, len: usize) -> Result<usize> {
        let pad = spec.padding.amount(spec.back_kernel);
        let mut l = len;
        for name in ["back.l1", "back.l2", "back.l4"] {
            l = conv_len(l, spec.back_kernel, pad, name)?;
        }
        Ok(l)
    }

    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let l1 = self.l1.forward(s, x)?;
        let l2 = self.l2.forward(s, l1)?;
        let l3 = add_cropped(s, l1, l2)?;
        let l4 = self.l4.forward(s, l3)?;
        let out = add_cropped(s, l3, l4)?;
        Ok(s.graph.global_avg_pool(out)?)
    }
}

#[derive(Clone, Debug)]
enum Branch {
    Model1 {
        convs: Vec<Conv2d>,
        embed: Dense,
    },
    Model2 {
        front: Vec<(ConvBnRelu1d, bool)>,
        back: ResidualBackEnd,
        embed: Dense,
    },
    Model3 {
        timbral: Vec<(Conv2d, usize)>,
        temporal: Vec<Conv1d>,
        back: ResidualBackEnd,
        embed: Dense,
    },
}

/// Siamese network: one branch applied to both inputs, subtraction merge,
/// and a dense output layer.
#[derive(Clone, Debug)]
pub struct SiameseModel<T: Scalar> {
    pub spec: ModelSpec,
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub seed: u64,
    pub store: ParamStore<T>,
    branch: Branch,
    head: Dense,
    /// Flattened size feeding the embedding layer (Model 1) or channel
    /// count after global pooling (Models 2 and 3).
    pub embed_inputs: usize,
    /// Spatial dims after the last Model 1 pooling stage, or the time
    /// length entering the back end for Models 2 and 3.
    pub final_dims: Vec<usize>,
}

/// Shape bookkeeping done before any parameter is created.
struct Plan {
    embed_inputs: usize,
    final_dims: Vec<usize>,
}

fn plan(spec: &ModelSpec, shape: &[usize]) -> Result<Plan> {
    match spec.variant {
        Variant::Model1Mel | Variant::Model1SpecTuned => {
            let [_, mut h, mut w] = spatial(shape, spec.variant)?;
            for (i, b) in spec.conv_blocks.iter().enumerate() {
                let name = format!("block{}.conv", i + 1);
                h = conv_len(h, b.kernel.0, spec.padding.amount(b.kernel.0), &name)?;
                w = conv_len(w, b.kernel.1, spec.padding.amount(b.kernel.1), &name)?;
                let name = format!("block{}.pool", i + 1);
                h = pool_len(h, spec.pool.0, &name)?;
                w = pool_len(w, spec.pool.1, &name)?;
            }
            let c = spec
                .conv_blocks
                .last()
                .map(|b| spec.scaled(b.filters))
                .unwrap_or(shape[0]);
            Ok(Plan {
                embed_inputs: c * h * w,
                final_dims: vec![h, w],
            })
        }
        Variant::Model2Waveform => {
            if shape.len() != 2 {
                return Err(Error::Size(format!(
                    "{} expects a [1, samples] input, got {shape:?}",
                    spec.variant.key()
                )));
            }
            let mut len = shape[1];
            let pad = spec.padding.amount(spec.front_kernel);
            for (i, &pooled) in spec.front_pooled.iter().enumerate() {
                len = conv_len(len, spec.front_kernel, pad, &format!("front{}.conv", i + 1))?;
                if pooled {
                    len = pool_len(len, spec.front_pool, &format!("front{}.pool", i + 1))?;
                }
            }
            ResidualBackEnd::out_len(spec, len)?;
            Ok(Plan {
                embed_inputs: spec.scaled(spec.back_channels),
                final_dims: vec![len],
            })
        }
        Variant::Model3Multikernel => {
            let [_, f, t] = spatial(shape, spec.variant)?;
            let tmin = model3_lengths(spec, f, t)?.into_iter().min().unwrap_or(0);
            if tmin == 0 {
                return Err(Error::Size("model3 has no front-end kernels".into()));
            }
            ResidualBackEnd::out_len(spec, tmin)?;
            Ok(Plan {
                embed_inputs: spec.scaled(spec.back_channels),
                final_dims: vec![tmin],
            })
        }
    }
}

fn spatial(shape: &[usize], v: Variant) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Size(format!(
            "{} expects a [channels, bins, frames] input, got {shape:?}",
            v.key()
        ))),
    }
}

/// Output time lengths of every Model 3 front-end path.
fn model3_lengths(spec: &ModelSpec, f: usize, t: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, k) in spec.timbral.iter().enumerate() {
        let name = format!("timbral{}", i + 1);
        let kh = k.height.resolve(f);
        conv_len(f, kh, 0, &name)?;
        out.push(conv_len(t, k.width, spec.padding.amount(k.width), &name)?);
    }
    for (i, &k) in spec.temporal_kernels.iter().enumerate() {
        out.push(conv_len(
            t,
            k,
            spec.padding.amount(k),
            &format!("temporal{}", i + 1),
        )?);
    }
    Ok(out)
}

impl<T: Scalar> SiameseModel<T> {
    /// Builds the network for per-sample inputs of `input_shape` with
    /// Glorot-initialized weights drawn from `seed`.
    pub fn new(spec: ModelSpec, input_shape: &[usize], seed: u64) -> Result<Self> {
        spec.validate()?;
        let Plan {
            embed_inputs,
            final_dims,
        } = plan(&spec, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = spec.embedding_dim;
        let branch = match spec.variant {
            Variant::Model1Mel | Variant::Model1SpecTuned => {
                let mut convs = Vec::new();
                let mut cin = input_shape[0];
                for (i, b) in spec.conv_blocks.iter().enumerate() {
                    let cout = spec.scaled(b.filters);
                    let pad = (
                        spec.padding.amount(b.kernel.0),
                        spec.padding.amount(b.kernel.1),
                    );
                    convs.push(Conv2d::new(
                        &mut store,
                        &format!("branch.block{}.conv", i + 1),
                        cin,
                        cout,
                        b.kernel,
                        (1, 1),
                        pad,
                        &mut rng,
                    )?);
                    cin = cout;
                }
                let embed =
                    Dense::new(&mut store, "branch.embedding", embed_inputs, emb, &mut rng)?;
                Branch::Model1 { convs, embed }
            }
            Variant::Model2Waveform => {
                let mut front = Vec::new();
                let mut cin = input_shape[0];
                let pad = spec.padding.amount(spec.front_kernel);
                for (i, (&f, &pooled)) in spec
                    .front_filters
                    .iter()
                    .zip(&spec.front_pooled)
                    .enumerate()
                {
                    let cout = spec.scaled(f);
                    let name = format!("branch.front{}", i + 1);
                    let layer = ConvBnRelu1d {
                        conv: Conv1d::new(
                            &mut store,
                            &format!("{name}.conv"),
                            cin,
                            cout,
                            spec.front_kernel,
                            pad,
                            &mut rng,
                        )?,
                        bn: BatchNorm::new(&mut store, &format!("{name}.bn"), cout)?,
                    };
                    front.push((layer, pooled));
                    cin = cout;
                }
                let back = ResidualBackEnd::build(&mut store, &spec, cin, &mut rng)?;
                let embed =
                    Dense::new(&mut store, "branch.embedding", embed_inputs, emb, &mut rng)?;
                Branch::Model2 { front, back, embed }
            }
            Variant::Model3Multikernel => {
                let f = input_shape[1];
                let cin = input_shape[0];
                let mut timbral = Vec::new();
                let tf = spec.scaled(spec.timbral_filters);
                for (i, k) in spec.timbral.iter().enumerate() {
                    let kh = k.height.resolve(f);
                    let conv = Conv2d::new(
                        &mut store,
                        &format!("branch.timbral{}.conv", i + 1),
                        cin,
                        tf,
                        (kh, k.width),
                        (1, 1),
                        (0, spec.padding.amount(k.width)),
                        &mut rng,
                    )?;
                    timbral.push((conv, f - kh + 1));
                }
                let pf = spec.scaled(spec.temporal_filters);
                let mut temporal = Vec::new();
                for (i, &k) in spec.temporal_kernels.iter().enumerate() {
                    temporal.push(Conv1d::new(
                        &mut store,
                        &format!("branch.temporal{}.conv", i + 1),
                        cin,
                        pf,
                        k,
                        spec.padding.amount(k),
                        &mut rng,
                    )?);
                }
                let concat_ch = tf * timbral.len() + pf * temporal.len();
                let back = ResidualBackEnd::build(&mut store, &spec, concat_ch, &mut rng)?;
                let embed =
                    Dense::new(&mut store, "branch.embedding", embed_inputs, emb, &mut rng)?;
                Branch::Model3 {
                    timbral,
                    temporal,
                    back,
                    embed,
                }
            }
        };
        let head = Dense::new(&mut store, "head.output", emb, spec.num_para, &mut rng)?;
        Ok(Self {
            spec,
            input_shape: input_shape.to_vec(),
            seed,
            store,
            branch,
            head,
            embed_inputs,
            final_dims,
        })
    }

    /// Parameter count of the embedding and output dense layers.
    pub fn head_param_count(&self) -> usize {
        let embed = match &self.branch {
            Branch::Model1 { embed, .. }
            | Branch::Model2 { embed, .. }
            | Branch::Model3 { embed, .. } => embed,
        };
        embed.param_count() + self.head.param_count()
    }

    /// FNV-1a checksum over the branch parameters only.
    pub fn branch_checksum(&self) -> u64 {
        let mut sub = ParamStore::<T>::new();
        for (_, e) in self
            .store
            .iter()
            .filter(|(_, e)| e.name.starts_with("branch."))
        {
            sub.add(e.name.clone(), e.value.clone(), e.trainable)
                .expect("names are unique in the source store");
        }
        sub.checksum()
    }

    /// Batched input tensor `[n, ..input_shape]` from per-sample buffers.
    pub fn batch_tensor(&self, samples: &[&[f32]]) -> Result<Tensor<T>> {
        let per: usize = self.input_shape.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::Size(format!(
                    "input of {} values does not match shape {:?}",
                    s.len(),
                    self.input_shape
                )));
            }
            data.extend(s.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&self.input_shape);
        Ok(Tensor::new(shape, data)?)
    }

    /// Runs a closure inside a fresh session over this model's parameters.
    pub fn with_session<R>(
        &mut self,
        mode: Mode,
        seed: u64,
        f: impl FnOnce(&mut Session<'_, T>, &Parts<'_>) -> Result<R>,
    ) -> Result<R> {
        let parts = Parts::new(&self.spec, &self.branch, &self.head);
        let mut s = Session::new(&mut self.store, mode, seed);
        f(&mut s, &parts)
    }

    /// MSE loss of a batch and the parameter gradients, in training mode.
    pub fn loss_and_grads(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        y: &Tensor<T>,
        seed: u64,
    ) -> Result<(f64, ParamGrads<T>)> {
        let parts = Parts::new(&self.spec, &self.branch, &self.head);
        let mut s = Session::new(&mut self.store, Mode::Train, seed);
        let loss = parts.loss(&mut s, a, b, y)?;
        let value = s.graph.value(loss).data()[0].as_f64();
        let grads = s.backward(loss)?;
        Ok((value, grads))
    }

    /// Loss value only, in the given mode.
    pub fn loss_value(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        y: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<f64> {
        self.with_session(mode, seed, |s, p| {
            let loss = p.loss(s, a, b, y)?;
            Ok(s.graph.value(loss).data()[0].as_f64())
        })
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_step(
        &mut self,
        opt: &mut Adadelta<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        y: &Tensor<T>,
        seed: u64,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(a, b, y, seed)?;
        opt.step(&mut self.store, &grads)?;
        Ok(loss)
    }

    /// Inference-mode predictions `[n, num_para]`, row-major.
    pub fn predict(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
        self.with_session(Mode::Infer, 0, |s, p| {
            let (_, pred) = p.forward_pair(s, a, b)?;
            Ok(s.graph.value(pred).data().to_vec())
        })
    }

    /// Inference-mode branch embedding of each sample in `x`, `[n, emb]`.
    pub fn branch_embedding(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.with_session(Mode::Infer, 0, |s, p| {
            let xv = s.input(x.clone())?;
            let e = p.branch_forward(s, xv)?;
            Ok(s.graph.value(e).data().to_vec())
        })
    }

    /// Merge vector `f(b) − f(a)` for one pair, inference mode. The two
    /// branch passes are computed separately, so `embed(x, x)` is exactly
    /// zero and `embed(a, b) = −embed(b, a)`.
    pub fn embed(&mut self, a: &[f32], b: &[f32]) -> Result<Vec<T>> {
        let ta = self.batch_tensor(&[a])?;
        let tb = self.batch_tensor(&[b])?;
        let ea = self.branch_embedding(&ta)?;
        let eb = self.branch_embedding(&tb)?;
        Ok(eb.iter().zip(&ea).map(|(&x, &y)| x - y).collect())
    }
}

/// Borrowed network pieces usable inside a session.
pub struct Parts<'m> {
    branch: &'m Branch,
    head: &'m Dense,
    spec: &'m ModelSpec,
}

impl<'m> Parts<'m> {
    fn new(spec: &'m ModelSpec, branch: &'m Branch, head: &'m Dense) -> Self {
        Self { branch, head, spec }
    }

    /// Branch forward pass to the embedding layer: `[n, ..] -> [n, emb]`.
    pub fn branch_forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self.branch {
            Branch::Model1 { convs, embed } => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(s, h)?;
                    h = s.graph.relu(h)?;
                    h = max_pool2d(s, h, self.spec.pool, &format!("block{}.pool", i + 1))?;
                    h = dropout(s, h, self.spec.dropout)?;
                }
                let flat = s.graph.flatten(h)?;
                Ok(embed.forward(s, flat)?)
            }
            Branch::Model2 { front, back, embed } => {
                let mut h = x;
                for (i, (layer, pooled)) in front.iter().enumerate() {
                    h = layer.forward(s, h)?;
                    if *pooled {
                        h = drc_autodiff::layers::max_pool1d(
                            s,
                            h,
                            self.spec.front_pool,
                            &format!("front{}.pool", i + 1),
                        )?;
                    }
                }
                let pooled = back.forward(s, h)?;
                Ok(embed.forward(s, pooled)?)
            }
            Branch::Model3 {
                timbral,
                temporal,
                back,
                embed,
            } => {
                let xs = s.graph.shape(x).to_vec();
                let (n, f) = (xs[0], xs[2]);
                let mut paths = Vec::new();
                for (conv, out_h) in timbral {
                    let y = conv.forward(s, x)?;
                    let y = s.graph.relu(y)?;
                    let y = s.graph.pool2d(y, (*out_h, 1), PoolMode::Max)?;
                    let ys = s.graph.shape(y).to_vec();
                    paths.push(s.graph.reshape(y, vec![n, ys[1], ys[3]])?);
                }
                let avg = s.graph.pool2d(x, (f, 1), PoolMode::Avg)?;
                let avs = s.graph.shape(avg).to_vec();
                let avg = s.graph.reshape(avg, vec![n, avs[1], avs[3]])?;
                for conv in temporal {
                    let y = conv.forward(s, avg)?;
                    paths.push(s.graph.relu(y)?);
                }
                let tmin = paths
                    .iter()
                    .map(|&p| *s.graph.shape(p).last().expect("rank 3"))
                    .min()
                    .expect("at least one path");
                let cropped = paths
                    .into_iter()
                    .map(|p| center_crop(s, p, tmin))
                    .collect::<Result<Vec<_>>>()?;
                let h = s.graph.concat(&cropped)?;
                let pooled = back.forward(s, h)?;
                Ok(embed.forward(s, pooled)?)
            }
        }
    }

    /// Merge vector `f(b) − f(a)` and the prediction for a batch of pairs.
    pub fn forward_pair<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        if a.shape() != b.shape() {
            return Err(Error::Size(format!(
                "pair inputs differ in shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let av = s.input(a.clone())?;
        let bv = s.input(b.clone())?;
        let ea = self.branch_forward(s, av)?;
        let eb = self.branch_forward(s, bv)?;
        let e = s.graph.sub(eb, ea)?;
        let pred = self.head.forward(s, e)?;
        Ok((e, pred))
    }

    pub fn loss<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        y: &Tensor<T>,
    ) -> Result<Var> {
        let (_, pred) = self.forward_pair(s, a, b)?;
        let target = s.input(y.clone())?;
        Ok(s.graph.mse_loss(pred, target)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model1_final_dims_follow_size_formula() {
        let spec = ModelSpec::for_variant(Variant::Model1Mel, 1);
        let m = SiameseModel::<f32>::new(spec, &[1, 128, 248], 0).unwrap();
        // 128 → 126 → 63 → 61 → 30 → 28 → 14 → 12 → 6 → 4 → 2
        // 248 → 246 → 123 → 121 → 60 → 58 → 29 → 27 → 13 → 11 → 5
        assert_eq!(m.final_dims, vec![2, 5]);
    }

    #[test]
    fn model1_head_parameter_count() {
        for num_para in [1, 2, 4] {
            let spec = ModelSpec::for_variant(Variant::Model1Mel, num_para);
            let m = SiameseModel::<f32>::new(spec, &[1, 128, 124], 0).unwrap();
            let flat = m.embed_inputs;
            assert_eq!(
                m.head_param_count(),
                flat * 50 + 50 + 50 * num_para + num_para
            );
        }
    }

    #[test]
    fn too_small_input_names_the_layer() {
        let spec = ModelSpec::for_variant(Variant::Model1Mel, 1);
        match SiameseModel::<f32>::new(spec, &[1, 65, 400], 0) {
            Err(Error::Size(msg)) => assert!(msg.contains("block"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn same_padding_keeps_small_spectrograms_usable() {
        let spec = ModelSpec::for_variant(Variant::Model1SpecTuned, 1);
        let m = SiameseModel::<f32>::new(spec, &[1, 65, 499], 0).unwrap();
        assert_eq!(m.final_dims, vec![2, 15]);
    }

    #[test]
    fn variant_keys_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.key()), Some(v));
        }
    }
}
