//! The classifier: a convolutional backbone, channel attention over its last
//! feature map, and the pooled dense classification head.
//!
//! Forward passes can record a [`Trace`]; [`Classifier::backward`] consumes it
//! and returns parameter gradients, gradients at named layers (for Grad-CAM)
//! and optionally the input gradient (for saliency).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, ChannelAttention};
use crate::nn::{glorot_uniform, he_normal, softmax_rows, BatchNorm1d, BatchNormCache, Conv2d, Dense, Param};

/// Layer name of the attention block output, the default Grad-CAM target.
pub const ATTENTION_LAYER: &str = "attention";

/// Parameter count the reference EfficientNetV2-L build reports.
pub const REFERENCE_TOTAL_PARAMS: u64 = 120_420_327;
/// Reference trainable fraction with the backbone frozen.
pub const REFERENCE_STAGE1_TRAINABLE_FRACTION: f64 = 0.129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ToyCnn,
    LargePretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Output channels of each 3x3 conv block, in topological order.
    pub channels: Vec<usize>,
    /// Stride of each block; stride 2 when shorter than `channels`.
    pub strides: Vec<usize>,
    pub pretrained: bool,
    /// Safetensors file with `backbone.{i}.weight` / `backbone.{i}.bias`.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::toy()
    }
}

impl BackboneSpec {
    /// Four stride-2 blocks, 16 -> 32 -> 64 -> 64 channels.
    pub fn toy() -> Self {
        BackboneSpec {
            kind: BackboneKind::ToyCnn,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 2],
            pretrained: false,
            weights: None,
        }
    }

    pub fn large_pretrained(weights: impl Into<PathBuf>) -> Self {
        BackboneSpec {
            kind: BackboneKind::LargePretrained,
            channels: Vec::new(),
            strides: Vec::new(),
            pretrained: true,
            weights: Some(weights.into()),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn layer_count(&self) -> usize {
        self.channels.len()
    }

    fn stride(&self, i: usize) -> usize {
        self.strides.get(i).copied().unwrap_or(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub reduction_ratio: usize,
    /// When set, must equal the backbone's feature channels.
    pub channels: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            reduction_ratio: 16,
            channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub dropout: f64,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dropout: 0.5,
            hidden_sizes: vec![1024, 512],
            num_classes: NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub attention: AttentionConfig,
    pub head: HeadConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeStage {
    /// Backbone frozen; attention and head train.
    FrozenBackbone = 1,
    /// Top 40% of backbone blocks unfrozen.
    PartialUnfreeze = 2,
    /// Everything trainable.
    Full = 3,
}

impl TryFrom<u8> for FreezeStage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(FreezeStage::FrozenBackbone),
            2 => Ok(FreezeStage::PartialUnfreeze),
            3 => Ok(FreezeStage::Full),
            other => Err(Error::invalid("stage", format!("unknown training stage {other}"))),
        }
    }
}

/// Number of backbone blocks unfrozen in stage 2: `ceil(0.4 * L)`.
pub fn partial_unfreeze_count(layers: usize) -> usize {
    (2 * layers).div_ceil(5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub total: u64,
    pub trainable: u64,
}

impl ParameterCounts {
    pub fn trainable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    spec: ModelSpec,
    blocks: Vec<Conv2d>,
    attention: ChannelAttention,
    norm: BatchNorm1d,
    hidden: Vec<Dense>,
    output: Dense,
    /// `true` = frozen, one entry per backbone block.
    frozen: Vec<bool>,
    stage: Option<FreezeStage>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input_shape: (usize, usize, usize, usize),
    cols: Array2<f64>,
    out: Array4<f64>,
}

/// Everything a forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    blocks: Vec<BlockCache>,
    attention: AttentionCache,
    features: Array4<f64>,
    pub pooled: Array2<f64>,
    norm: BatchNormCache,
    dropout_mask: Option<Array2<f64>>,
    dense_inputs: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl Trace {
    /// Activations of a named layer (`block1`..`blockL` or `attention`).
    pub fn layer(&self, name: &str) -> Option<&Array4<f64>> {
        if name == ATTENTION_LAYER {
            return Some(&self.features);
        }
        block_index(name).and_then(|i| self.blocks.get(i)).map(|b| &b.out)
    }

    pub fn features(&self) -> &Array4<f64> {
        &self.features
    }
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("block")
        .and_then(|n| n.parse::<usize>().ok())
        .and_then(|n| n.checked_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    None,
    /// Only parameters of unfrozen layers.
    Trainable,
    /// Every parameter, frozen or not.
    All,
}

#[derive(Debug, Clone)]
pub struct BackwardRequest {
    pub params: ParamGrads,
    pub input: bool,
    pub layers: Vec<String>,
}

impl BackwardRequest {
    pub fn training() -> Self {
        BackwardRequest {
            params: ParamGrads::Trainable,
            input: false,
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub layers: BTreeMap<String, Array4<f64>>,
    pub input: Option<Array4<f64>>,
}

impl Classifier {
    /// Assembles backbone, attention and head with seed-deterministic
    /// initialization.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = spec.clone();
        let blocks = match spec.backbone.kind {
            BackboneKind::ToyCnn => {
                if spec.backbone.channels.is_empty() {
                    return Err(Error::invalid("backbone.channels", "at least one block required"));
                }
                let mut in_ch = 3;
                let mut blocks = Vec::new();
                for (i, &out_ch) in spec.backbone.channels.iter().enumerate() {
                    if out_ch == 0 {
                        return Err(Error::invalid("backbone.channels", "zero-width block"));
                    }
                    let stride = spec.backbone.stride(i);
                    blocks.push(Conv2d::new(&format!("backbone.{i}"), in_ch, out_ch, 3, stride, &mut rng));
                    in_ch = out_ch;
                }
                blocks
            }
            BackboneKind::LargePretrained => {
                let path = spec.backbone.weights.clone().ok_or_else(|| {
                    Error::Config("large_pretrained backbone needs a `weights` file".into())
                })?;
                let (blocks, strides) = load_backbone_weights(&path)?;
                spec.backbone.channels = blocks.iter().map(|b| b.out_channels()).collect();
                spec.backbone.strides = strides;
                blocks
            }
        };
        let c = spec.backbone.feature_channels();
        if let Some(att_c) = spec.attention.channels {
            if att_c != c {
                return Err(Error::invalid(
                    "attention.channels",
                    format!("attention expects {att_c} channels but the backbone produces {c}"),
                ));
            }
        }
        let head = &spec.head;
        if !(0.0..1.0).contains(&head.dropout) {
            return Err(Error::invalid("head.dropout", "must be in [0, 1)"));
        }
        if head.num_classes != NUM_CLASSES {
            return Err(Error::invalid(
                "head.num_classes",
                format!("must be {NUM_CLASSES}"),
            ));
        }
        let attention = ChannelAttention::new(c, spec.attention.reduction_ratio, &mut rng)?;
        let norm = BatchNorm1d::new("head.norm", c);
        let mut width = c;
        let mut hidden = Vec::new();
        for (i, &units) in head.hidden_sizes.iter().enumerate() {
            hidden.push(Dense::from_weights(
                &format!("head.dense{i}"),
                he_normal(&mut rng, width, (width, units)),
                Array1::zeros(units),
            ));
            width = units;
        }
        let output = Dense::from_weights(
            "head.output",
            glorot_uniform(&mut rng, (width, NUM_CLASSES)),
            Array1::zeros(NUM_CLASSES),
        );
        let frozen = vec![false; blocks.len()];
        Ok(Classifier {
            spec,
            blocks,
            attention,
            norm,
            hidden,
            output,
            frozen,
            stage: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn freeze_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn stage(&self) -> Option<FreezeStage> {
        self.stage
    }

    pub fn attention(&self) -> &ChannelAttention {
        &self.attention
    }

    pub fn attention_mut(&mut self) -> &mut ChannelAttention {
        &mut self.attention
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense {
        &mut self.output
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.blocks.len()).map(|i| format!("block{i}")).collect();
        names.push(ATTENTION_LAYER.to_string());
        names
    }

    pub fn set_freeze_stage(&mut self, stage: FreezeStage) {
        let l = self.blocks.len();
        self.frozen = match stage {
            FreezeStage::FrozenBackbone => vec![true; l],
            FreezeStage::PartialUnfreeze => {
                let open = partial_unfreeze_count(l);
                (0..l).map(|i| i < l - open).collect()
            }
            FreezeStage::Full => vec![false; l],
        };
        self.stage = Some(stage);
    }

    /// Parameters in canonical order: backbone, attention, head.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.attention.params());
        out.extend(self.norm.params());
        for d in &self.hidden {
            out.extend(d.params());
        }
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.attention.params_mut());
        out.extend(self.norm.params_mut());
        for d in &mut self.hidden {
            out.extend(d.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match name
            .strip_prefix("backbone.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
        {
            Some(i) => !self.frozen.get(i).copied().unwrap_or(false),
            None => true,
        }
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        let mut counts = ParameterCounts {
            total: 0,
            trainable: 0,
        };
        for p in self.params() {
            counts.total += p.len() as u64;
            if self.is_trainable(&p.name) {
                counts.trainable += p.len() as u64;
            }
        }
        counts
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<()> {
        let (b, h, w, c) = batch.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected B x H x W x 3 input, got {:?}", batch.shape())));
        }
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty input batch {:?}", batch.shape())));
        }
        Ok(())
    }

    fn backbone_forward(&self, batch: &Array4<f64>) -> Result<(Vec<BlockCache>, AttentionCache, Array4<f64>)> {
        self.check_input(batch)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for conv in &self.blocks {
            let input_shape = x.dim();
            let (mut y, cols) = conv.forward(&x);
            crate::nn::relu_inplace(&mut y);
            caches.push(BlockCache {
                input_shape,
                cols,
                out: y.clone(),
            });
            x = y;
        }
        let (features, att) = self.attention.forward(&x)?;
        Ok((caches, att, features))
    }

    fn head_forward(
        &self,
        norm: (Array2<f64>, BatchNormCache),
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> (BatchNormCache, Option<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>) {
        let (mut x, norm_cache) = norm;
        let mask = match dropout_rng {
            Some(rng) if self.spec.head.dropout > 0.0 => {
                let keep = 1.0 - self.spec.head.dropout;
                let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                x *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let mut dense_inputs = Vec::with_capacity(self.hidden.len() + 1);
        for d in &self.hidden {
            let mut y = d.forward(&x.view());
            crate::nn::relu_inplace(&mut y);
            dense_inputs.push(x);
            x = y;
        }
        let logits = self.output.forward(&x.view());
        dense_inputs.push(x);
        (norm_cache, mask, dense_inputs, logits)
    }

    /// Inference-mode pass (dropout off, batch norm on running statistics).
    pub fn forward_trace(&self, batch: &Array4<f64>) -> Result<Trace> {
        let (blocks, attention, features) = self.backbone_forward(batch)?;
        let pooled = global_average_pool(&features);
        let norm = self.norm.forward_eval(&pooled);
        let (norm, dropout_mask, dense_inputs, logits) = self.head_forward(norm, None);
        let probs = softmax_rows(&logits);
        Ok(Trace {
            blocks,
            attention,
            features,
            pooled,
            norm,
            dropout_mask,
            dense_inputs,
            logits,
            probs,
        })
    }

    /// Training-mode pass: batch statistics (running estimates updated) and
    /// dropout drawn from `rng`.
    pub fn forward_train<R: RngCore>(&mut self, batch: &Array4<f64>, rng: &mut R) -> Result<Trace> {
        let (blocks, attention, features) = self.backbone_forward(batch)?;
        let pooled = global_average_pool(&features);
        let norm = self.norm.forward(&pooled, true);
        let (norm, dropout_mask, dense_inputs, logits) = self.head_forward(norm, Some(rng));
        let probs = softmax_rows(&logits);
        Ok(Trace {
            blocks,
            attention,
            features,
            pooled,
            norm,
            dropout_mask,
            dense_inputs,
            logits,
            probs,
        })
    }

    /// Class probabilities and the attention-block feature maps.
    pub fn forward(&self, batch: &Array4<f64>) -> Result<(Array2<f64>, Array4<f64>)> {
        let t = self.forward_trace(batch)?;
        Ok((t.probs, t.features))
    }

    pub fn backward(&self, trace: &Trace, dlogits: &Array2<f64>, req: &BackwardRequest) -> Result<Gradients> {
        if dlogits.dim() != trace.logits.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match logits {:?}",
                dlogits.shape(),
                trace.logits.shape()
            )));
        }
        for name in &req.layers {
            if trace.layer(name).is_none() {
                return Err(Error::invalid("layer", format!("unknown layer {name:?}")));
            }
        }
        let want = |name: &str| match req.params {
            ParamGrads::None => false,
            ParamGrads::Trainable => self.is_trainable(name),
            ParamGrads::All => true,
        };
        let mut grads = Gradients::default();
        let put = |grads: &mut Gradients, p: &Param, g: ArrayD<f64>| {
            grads.params.insert(p.name.clone(), g);
        };

        // Head, last layer first.
        let head_params = req.params != ParamGrads::None;
        let mut d = dlogits.clone();
        let dense_layers: Vec<&Dense> = self.hidden.iter().chain(std::iter::once(&self.output)).collect();
        for (i, layer) in dense_layers.iter().enumerate().rev() {
            let x = &trace.dense_inputs[i];
            let (dw, db, dx) = layer.backward(&x.view(), &d.view(), true);
            if head_params {
                put(&mut grads, &layer.weight, dw.into_dyn());
                put(&mut grads, &layer.bias, db.into_dyn());
            }
            let mut dx = dx.expect("requested");
            if i > 0 {
                crate::nn::relu_backward(&mut dx, x);
            }
            d = dx;
        }
        if let Some(mask) = &trace.dropout_mask {
            d *= mask;
        }
        let (dgamma, dbeta, dpooled) = self.norm.backward(&trace.norm, &d);
        if head_params {
            put(&mut grads, &self.norm.gamma, dgamma.into_dyn());
            put(&mut grads, &self.norm.beta, dbeta.into_dyn());
        }

        let (b, h, w, c) = trace.features.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut dfeat = Array4::zeros((b, h, w, c));
        for bi in 0..b {
            let row = dpooled.row(bi).mapv(|v| v * scale);
            for mut px in dfeat.index_axis_mut(Axis(0), bi).lanes_mut(Axis(2)) {
                px.assign(&row);
            }
        }
        if req.layers.iter().any(|l| l == ATTENTION_LAYER) {
            grads.layers.insert(ATTENTION_LAYER.to_string(), dfeat.clone());
        }

        let captured = |i: usize| req.layers.iter().any(|l| block_index(l) == Some(i));
        let lowest = (0..self.blocks.len())
            .find(|&i| req.input || captured(i) || self.blocks[i].params().iter().any(|p| want(&p.name)));

        let att_params = self.attention.params().iter().any(|p| want(&p.name));
        let (att_grads, dblock) = self
            .attention
            .backward(&trace.attention, &dfeat, att_params, lowest.is_some());
        if let Some(gs) = att_grads {
            for (p, g) in self.attention.params().into_iter().zip(gs) {
                put(&mut grads, p, g);
            }
        }

        if let Some(lowest) = lowest {
            let mut d = dblock.expect("requested");
            for i in (lowest..self.blocks.len()).rev() {
                if captured(i) {
                    grads.layers.insert(format!("block{}", i + 1), d.clone());
                }
                let cache = &trace.blocks[i];
                crate::nn::relu_backward(&mut d, &cache.out);
                let conv = &self.blocks[i];
                let want_params = conv.params().iter().any(|p| want(&p.name));
                let want_dx = i > lowest || (i == 0 && req.input);
                let (pg, dx) = conv.backward(&cache.cols, &d, cache.input_shape, want_params, want_dx);
                if let Some((dw, db)) = pg {
                    put(&mut grads, &conv.weight, dw.into_dyn());
                    put(&mut grads, &conv.bias, db.into_dyn());
                }
                match dx {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
            if req.input {
                grads.input = Some(d);
            }
        }
        Ok(grads)
    }

    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), to_bytes(p.value.iter())))
            .collect();
        tensors.push(("head.norm.running_mean".into(), vec![self.norm.running_mean.len()], to_bytes(self.norm.running_mean.iter())));
        tensors.push(("head.norm.running_var".into(), vec![self.norm.running_var.len()], to_bytes(self.norm.running_var.iter())));
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let views = tensors
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let bytes = safetensors::tensor::serialize(views, &None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params_path = dir.join(PARAMS_FILE);
        fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
        let mut meta = meta.clone();
        meta.format_version = CHECKPOINT_FORMAT_VERSION;
        meta.spec = self.spec.clone();
        meta.freeze_stage = self.stage.map(|s| s as u8);
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                meta.format_version
            )));
        }
        let params_path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let tensors = read_tensors(&bytes)?;

        // Rebuild the architecture as a toy stack of the saved shapes, then
        // overwrite every tensor.
        let mut spec = meta.spec.clone();
        spec.backbone.kind = BackboneKind::ToyCnn;
        let mut model = Classifier::build(&spec, 0)?;
        model.spec = meta.spec.clone();
        for p in model.params_mut() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (name, buf) in [
            ("head.norm.running_mean", &mut model.norm.running_mean),
            ("head.norm.running_var", &mut model.norm.running_var),
        ] {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            *buf = Array1::from(t.iter().copied().collect::<Vec<_>>());
        }
        if let Some(s) = meta.freeze_stage {
            model.set_freeze_stage(FreezeStage::try_from(s)?);
        }
        Ok((model, meta))
    }
}

pub fn global_average_pool(x: &Array4<f64>) -> Array2<f64> {
    x.mean_axis(Axis(1))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("nonempty spatial dims")
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const META_FILE: &str = "model.json";

/// JSON sidecar stored next to the parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub freeze_stage: Option<u8>,
    pub stage: Option<u8>,
    pub epoch: Option<usize>,
    /// Free-form metric history (per-epoch records).
    #[serde(default)]
    pub history: serde_json::Value,
}

fn to_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn read_tensors(bytes: &[u8]) -> Result<HashMap<String, ArrayD<f64>>> {
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            safetensors::Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            safetensors::Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {other:?}"))),
        };
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Loads a pretrained conv stack. Kernels may be stored either as
/// `[9 * c_in, c_out]` matrices or as `[3, 3, c_in, c_out]` (HWIO) arrays;
/// strides come from the optional `strides` metadata entry.
fn load_backbone_weights(path: &Path) -> Result<(Vec<Conv2d>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let strides_meta: Option<Vec<usize>> = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("strides"))
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let tensors = read_tensors(&bytes)?;
    let mut blocks = Vec::new();
    let mut strides = Vec::new();
    let mut in_ch = 3;
    for i in 0.. {
        let Some(w) = tensors.get(&format!("backbone.{i}.weight")) else { break };
        let w2 = match w.ndim() {
            2 => w.clone().into_dimensionality().expect("2-d"),
            4 if w.shape()[0] == 3 && w.shape()[1] == 3 => {
                let (ci, co) = (w.shape()[2], w.shape()[3]);
                w.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((9 * ci, co))
                    .map_err(|e| Error::Checkpoint(e.to_string()))?
            }
            _ => return Err(Error::Checkpoint(format!("backbone.{i}.weight has shape {:?}", w.shape()))),
        };
        if w2.nrows() != 9 * in_ch {
            return Err(Error::invalid(
                "backbone.weights",
                format!("block {i} expects {} input channels, previous block produces {in_ch}", w2.nrows() / 9),
            ));
        }
        let co = w2.ncols();
        let bias = tensors
            .get(&format!("backbone.{i}.bias"))
            .map(|b| Array1::from(b.iter().copied().collect::<Vec<_>>()))
            .unwrap_or_else(|| Array1::zeros(co));
        let stride = strides_meta.as_ref().and_then(|s| s.get(i).copied()).unwrap_or(2);
        blocks.push(Conv2d::from_weights(&format!("backbone.{i}"), w2, bias, 3, stride));
        strides.push(stride);
        in_ch = co;
    }
    if blocks.is_empty() {
        return Err(Error::Checkpoint(format!("{} holds no backbone.* tensors", path.display())));
    }
    Ok((blocks, strides))
}
