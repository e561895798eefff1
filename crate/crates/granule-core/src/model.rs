//! ResNet-18 backbone with a replaceable fully connected head.
//!
//! The backbone is the canonical 18-layer topology: a 7×7/64 stride-2 stem
//! with batch norm and a 3×3 stride-2 max pool, four stages of basic
//! residual blocks at widths 64/128/256/512 (stages 2–4 entering at stride
//! 2 through a 1×1 projection shortcut), and a global average pool. The
//! head replaces the usual single classifier with 512→500→100→K fully
//! connected layers, ReLU and 0.5 dropout after each hidden layer, and a
//! final log-softmax so the loss is plain negative log-likelihood.
//!
//! Freezing: with `freeze_backbone` every `backbone.*` tensor is excluded
//! from optimization, and backbone batch-norm layers run on their running
//! statistics even during training so the frozen tensors stay bit-identical
//! across a whole run.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormState, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};
use crate::train::checkpoint::{Checkpoint, CheckpointMeta, TensorData};
use crate::Mode;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Backbone size. `Reduced` keeps the exact topology (stem, four stages,
/// projection shortcuts) at a quarter of the widths and one block per
/// stage; it exists so continuous-integration runs finish quickly, while
/// `Full` is the real 18-layer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArch {
    Full,
    Reduced,
}

impl BackboneArch {
    fn stage_widths(self) -> [usize; 4] {
        match self {
            BackboneArch::Full => [64, 128, 256, 512],
            BackboneArch::Reduced => [16, 32, 64, 128],
        }
    }

    fn blocks_per_stage(self) -> usize {
        match self {
            BackboneArch::Full => 2,
            BackboneArch::Reduced => 1,
        }
    }
}

impl fmt::Display for BackboneArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneArch::Full => write!(f, "resnet18"),
            BackboneArch::Reduced => write!(f, "resnet18-reduced"),
        }
    }
}

/// What to build: class count, hidden widths of the head, dropout, freeze.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_classes: usize,
    pub head_hidden: Vec<usize>,
    pub dropout_p: f64,
    pub freeze_backbone: bool,
    pub backbone: BackboneArch,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            num_classes: 9,
            head_hidden: vec![500, 100],
            dropout_p: 0.5,
            freeze_backbone: false,
            backbone: BackboneArch::Full,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::argument("model", "num_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::argument(
                "model",
                format!("dropout_p must satisfy 0 ≤ p < 1, got {}", self.dropout_p),
            ));
        }
        if self.head_hidden.iter().any(|&width| width == 0) {
            return Err(Error::argument("model", "head widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Parameter,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor<f32>,
    role: Role,
    trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ParamId(usize);

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LinearLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    downsample: Option<(ConvLayer, BnLayer)>,
}

#[derive(Debug, Clone)]
struct Architecture {
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<BasicBlock>>,
    head: Vec<LinearLayer>,
}

/// One forward pass recorded on a graph; keeps the parameter leaves so the
/// training loop can read their gradients back.
pub struct ForwardPass {
    pub output: Var,
    param_vars: Vec<(usize, Var)>,
}

impl ForwardPass {
    /// Gradients of the trainable parameters, keyed by name.
    pub fn gradients(&self, model: &Model, graph: &Graph<f32>) -> HashMap<String, Tensor<f32>> {
        let mut grads = HashMap::new();
        for &(entry, var) in &self.param_vars {
            if let Some(grad) = graph.grad(var) {
                grads.insert(model.entries[entry].name.clone(), grad.clone());
            }
        }
        grads
    }
}

/// The network: named tensors plus the wiring between them.
#[derive(Clone)]
pub struct Model {
    spec: ModelSpec,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    arch: Architecture,
    feature_width: usize,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
}

struct Builder {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    trainable_backbone: bool,
}

impl Builder {
    fn insert(&mut self, name: String, value: Tensor<f32>, role: Role, trainable: bool) -> ParamId {
        debug_assert!(!self.index.contains_key(&name), "duplicate tensor {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            role,
            trainable,
        });
        ParamId(id)
    }

    /// Zero-mean normal, std = sqrt(2 / fan_in).
    fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data).expect("shape/product consistent")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        backbone: bool,
    ) -> ConvLayer {
        let fan_in = in_ch * kernel * kernel;
        let weight = self.kaiming(vec![out_ch, in_ch, kernel, kernel], fan_in);
        let trainable = !backbone || self.trainable_backbone;
        ConvLayer {
            weight: self.insert(format!("{name}.weight"), weight, Role::Parameter, trainable),
            stride,
            padding,
        }
    }

    fn bn(&mut self, name: &str, channels: usize, backbone: bool) -> BnLayer {
        let trainable = !backbone || self.trainable_backbone;
        BnLayer {
            gamma: self.insert(
                format!("{name}.weight"),
                Tensor::ones(vec![channels]),
                Role::Parameter,
                trainable,
            ),
            beta: self.insert(
                format!("{name}.bias"),
                Tensor::zeros(vec![channels]),
                Role::Parameter,
                trainable,
            ),
            running_mean: self.insert(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
                Role::Buffer,
                false,
            ),
            running_var: self.insert(
                format!("{name}.running_var"),
                Tensor::ones(vec![channels]),
                Role::Buffer,
                false,
            ),
        }
    }

    fn linear(&mut self, name: &str, out_features: usize, in_features: usize) -> LinearLayer {
        let weight = self.kaiming(vec![out_features, in_features], in_features);
        LinearLayer {
            weight: self.insert(format!("{name}.weight"), weight, Role::Parameter, true),
            bias: self.insert(
                format!("{name}.bias"),
                Tensor::zeros(vec![out_features]),
                Role::Parameter,
                true,
            ),
        }
    }

    fn block(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> BasicBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), out_ch, in_ch, 3, stride, 1, true);
        let bn1 = self.bn(&format!("{name}.bn1"), out_ch, true);
        let conv2 = self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, true);
        let bn2 = self.bn(&format!("{name}.bn2"), out_ch, true);
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            let conv = self.conv(
                &format!("{name}.downsample.conv"),
                out_ch,
                in_ch,
                1,
                stride,
                0,
                true,
            );
            let bn = self.bn(&format!("{name}.downsample.bn"), out_ch, true);
            (conv, bn)
        });
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }
}

/// Build the network with fresh fan-in-scaled weights.
pub fn build_resnet18(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model> {
    spec.validate()?;
    let mut builder = Builder {
        entries: Vec::new(),
        index: HashMap::new(),
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        trainable_backbone: !spec.freeze_backbone,
    };
    let widths = spec.backbone.stage_widths();
    let blocks = spec.backbone.blocks_per_stage();

    let stem_conv = builder.conv("backbone.conv1", widths[0], 3, 7, 2, 3, true);
    let stem_bn = builder.bn("backbone.bn1", widths[0], true);

    let mut stages = Vec::with_capacity(4);
    let mut in_ch = widths[0];
    for (stage, &out_ch) in widths.iter().enumerate() {
        let mut stage_blocks = Vec::with_capacity(blocks);
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("backbone.layer{}.{}", stage + 1, block);
            stage_blocks.push(builder.block(&name, in_ch, out_ch, stride));
            in_ch = out_ch;
        }
        stages.push(stage_blocks);
    }

    let feature_width = *widths.last().expect("four stages");
    let mut head = Vec::with_capacity(spec.head_hidden.len() + 1);
    let mut in_features = feature_width;
    for (layer, &width) in spec
        .head_hidden
        .iter()
        .chain(std::iter::once(&spec.num_classes))
        .enumerate()
    {
        head.push(builder.linear(&format!("head.fc{}", layer + 1), width, in_features));
        in_features = width;
    }

    let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
    Ok(Model {
        spec: spec.clone(),
        entries: builder.entries,
        index: builder.index,
        arch: Architecture {
            stem_conv,
            stem_bn,
            stages,
            head,
        },
        feature_width,
        mode: Mode::Train,
        dropout_rng,
    })
}

/// Parameter bookkeeping from [`Model::count_params`]; buffers (running
/// statistics) are not parameters and are excluded.
#[derive(Debug, Clone)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub per_tensor: Vec<(String, usize)>,
}

/// How [`Model::load_checkpoint`] matches checkpoint tensors to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadPolicy {
    /// Load everything except `head.*`, leaving the head at fresh
    /// initialization — the transfer-learning path.
    BackboneOnly,
    /// Load every tensor present in both; tolerate missing/extra names.
    Full,
    /// Require the checkpoint and model tensor sets to match exactly.
    Strict,
}

/// What a load did: names loaded, names skipped (policy or extra), names
/// the checkpoint lacked.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    pub missing: Vec<String>,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// All named tensors (parameters and running statistics) in creation
    /// order — the exact set a checkpoint stores.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries
            .iter()
            .map(|entry| (entry.name.as_str(), &entry.value))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&id| &self.entries[id].value)
    }

    /// Replace a named tensor; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let id = *self.index.get(name).ok_or_else(|| Error::Load {
            name: name.to_string(),
            message: "no such tensor in the model".into(),
        })?;
        if self.entries[id].value.shape() != value.shape() {
            return Err(Error::Load {
                name: name.to_string(),
                message: format!(
                    "shape {:?} does not match model shape {:?}",
                    value.shape(),
                    self.entries[id].value.shape()
                ),
            });
        }
        self.entries[id].value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&id| self.entries[id].trainable)
            .unwrap_or(false)
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            total: 0,
            trainable: 0,
            per_tensor: Vec::new(),
        };
        for entry in &self.entries {
            if entry.role != Role::Parameter {
                continue;
            }
            let numel = entry.value.numel();
            counts.total += numel;
            if entry.trainable {
                counts.trainable += numel;
            }
            counts.per_tensor.push((entry.name.clone(), numel));
        }
        counts
    }

    fn leaf(&self, graph: &mut Graph<f32>, pass: &mut ForwardPass, id: ParamId) -> Var {
        let entry = &self.entries[id.0];
        let var = graph.leaf(entry.value.clone(), entry.trainable);
        if entry.trainable {
            pass.param_vars.push((id.0, var));
        }
        var
    }

    fn bn_state(&self, layer: &BnLayer) -> BatchNormState<f32> {
        BatchNormState {
            running_mean: self.entries[layer.running_mean.0].value.data().to_vec(),
            running_var: self.entries[layer.running_var.0].value.data().to_vec(),
        }
    }

    fn store_bn_state(&mut self, layer: &BnLayer, state: BatchNormState<f32>) {
        let channels = state.running_mean.len();
        self.entries[layer.running_mean.0].value =
            Tensor::from_vec(vec![channels], state.running_mean).expect("channel count fixed");
        self.entries[layer.running_var.0].value =
            Tensor::from_vec(vec![channels], state.running_var).expect("channel count fixed");
    }

    fn batchnorm(
        &mut self,
        graph: &mut Graph<f32>,
        pass: &mut ForwardPass,
        layer: BnLayer,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.leaf(graph, pass, layer.gamma);
        let beta = self.leaf(graph, pass, layer.beta);
        let mut state = self.bn_state(&layer);
        let out = graph.batchnorm2d(x, gamma, beta, &mut state, BN_EPS, BN_MOMENTUM, mode)?;
        if mode == Mode::Train {
            self.store_bn_state(&layer, state);
        }
        Ok(out)
    }

    fn block_forward(
        &mut self,
        graph: &mut Graph<f32>,
        pass: &mut ForwardPass,
        block: BasicBlock,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let weight1 = self.leaf(graph, pass, block.conv1.weight);
        let mut out = graph.conv2d(x, weight1, None, block.conv1.stride, block.conv1.padding)?;
        out = self.batchnorm(graph, pass, block.bn1, out, mode)?;
        out = graph.relu(out)?;
        let weight2 = self.leaf(graph, pass, block.conv2.weight);
        out = graph.conv2d(out, weight2, None, block.conv2.stride, block.conv2.padding)?;
        out = self.batchnorm(graph, pass, block.bn2, out, mode)?;
        let shortcut = match block.downsample {
            Some((conv, bn)) => {
                let weight = self.leaf(graph, pass, conv.weight);
                let projected = graph.conv2d(x, weight, None, conv.stride, conv.padding)?;
                self.batchnorm(graph, pass, bn, projected, mode)?
            }
            None => x,
        };
        let joined = graph.add(out, shortcut)?;
        graph.relu(joined)
    }

    /// Run the network on an N×3×224×224 batch, recording onto `graph`.
    /// Output rows are log-probabilities. Train mode updates batch-norm
    /// running statistics (unless the backbone is frozen) and draws dropout
    /// masks from the model's seeded stream.
    pub fn forward(&mut self, graph: &mut Graph<f32>, batch: &Tensor<f32>) -> Result<ForwardPass> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != 224 || shape[3] != 224 {
            return Err(Error::shape(
                "forward",
                format!("expected N×3×224×224 input, got {shape:?}"),
            ));
        }
        let mode = self.mode;
        // A frozen backbone keeps its running statistics: normalize with
        // them even in train mode.
        let backbone_mode = if self.spec.freeze_backbone {
            Mode::Eval
        } else {
            mode
        };
        let input = graph.leaf(batch.clone(), false);
        let mut pass = ForwardPass {
            output: input,
            param_vars: Vec::new(),
        };

        let stem = self.arch.stem_conv;
        let stem_weight = self.leaf(graph, &mut pass, stem.weight);
        let mut out = graph.conv2d(input, stem_weight, None, stem.stride, stem.padding)?;
        out = self.batchnorm(graph, &mut pass, self.arch.stem_bn, out, backbone_mode)?;
        out = graph.relu(out)?;
        out = graph.maxpool2d(out, 3, 2, 1)?;

        for stage in self.arch.stages.clone() {
            for block in stage {
                out = self.block_forward(graph, &mut pass, block, out, backbone_mode)?;
            }
        }
        out = graph.global_avgpool(out)?;

        let head = self.arch.head.clone();
        let last = head.len() - 1;
        for (layer_index, layer) in head.into_iter().enumerate() {
            let weight = self.leaf(graph, &mut pass, layer.weight);
            let bias = self.leaf(graph, &mut pass, layer.bias);
            out = graph.linear(out, weight, bias)?;
            if layer_index < last {
                out = graph.relu(out)?;
                out = graph.dropout(out, self.spec.dropout_p, mode, &mut self.dropout_rng)?;
            }
        }
        pass.output = graph.log_softmax(out)?;
        Ok(pass)
    }

    /// Eval-semantics inference: deterministic, no gradient bookkeeping, no
    /// state mutation. Usable concurrently from clones.
    pub fn infer(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut scratch = self.clone();
        scratch.set_mode(Mode::Eval);
        let mut graph = Graph::new();
        let pass = scratch.forward(&mut graph, batch)?;
        Ok(graph.value(pass.output).clone())
    }

    /// Snapshot every named tensor into a checkpoint container.
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let tensors = self
            .entries
            .iter()
            .map(|entry| {
                (
                    entry.name.clone(),
                    TensorData::F32 {
                        shape: entry.value.shape().to_vec(),
                        data: entry.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Copy checkpoint tensors into the model under `policy`. Shape or
    /// dtype conflicts fail before anything is written, so a failed load
    /// never leaves the model half-mutated.
    pub fn load_checkpoint(
        &mut self,
        checkpoint: &Checkpoint,
        policy: LoadPolicy,
    ) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let by_name: HashMap<&str, &TensorData> = checkpoint
            .tensors
            .iter()
            .map(|(name, data)| (name.as_str(), data))
            .collect();

        let targeted = |name: &str| match policy {
            LoadPolicy::BackboneOnly => !name.starts_with("head."),
            LoadPolicy::Full | LoadPolicy::Strict => true,
        };

        // Validate everything before writing anything.
        let mut staged: Vec<(usize, Tensor<f32>)> = Vec::new();
        for (id, entry) in self.entries.iter().enumerate() {
            if !targeted(&entry.name) {
                report.skipped.push(entry.name.clone());
                continue;
            }
            match by_name.get(entry.name.as_str()) {
                Some(TensorData::F32 { shape, data }) => {
                    if shape != entry.value.shape() {
                        return Err(Error::Load {
                            name: entry.name.clone(),
                            message: format!(
                                "checkpoint shape {:?} does not match model shape {:?}",
                                shape,
                                entry.value.shape()
                            ),
                        });
                    }
                    staged.push((id, Tensor::from_vec(shape.clone(), data.clone())?));
                }
                Some(TensorData::F64 { .. }) => {
                    return Err(Error::Load {
                        name: entry.name.clone(),
                        message: format!(
                            "checkpoint dtype {} does not match model dtype {}",
                            Dtype::F64,
                            Dtype::F32
                        ),
                    });
                }
                None => {
                    if policy == LoadPolicy::Strict {
                        return Err(Error::Load {
                            name: entry.name.clone(),
                            message: "missing from checkpoint (strict policy)".into(),
                        });
                    }
                    report.missing.push(entry.name.clone());
                }
            }
        }
        for (name, _) in &checkpoint.tensors {
            if !self.index.contains_key(name) {
                if policy == LoadPolicy::Strict {
                    return Err(Error::Load {
                        name: name.clone(),
                        message: "not present in the model (strict policy)".into(),
                    });
                }
                report.skipped.push(name.clone());
            }
        }

        for (id, value) in staged {
            report.loaded.push(self.entries[id].name.clone());
            self.entries[id].value = value;
        }
        Ok(report)
    }

    /// Apply one optimizer update from name-keyed gradients. Only trainable
    /// parameters are touched.
    pub fn apply_gradients(
        &mut self,
        state: &mut crate::train::AdamState,
        config: &crate::train::TrainConfig,
        grads: &HashMap<String, Tensor<f32>>,
    ) -> Result<()> {
        let mut pairs: Vec<(&str, &mut Tensor<f32>, &Tensor<f32>)> = Vec::new();
        for entry in self.entries.iter_mut() {
            if entry.role != Role::Parameter || !entry.trainable {
                continue;
            }
            if let Some(grad) = grads.get(&entry.name) {
                pairs.push((entry.name.as_str(), &mut entry.value, grad));
            }
        }
        state.step(config, pairs)
    }
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts = self.count_params();
        write!(
            f,
            "Model({}, classes={}, params={}, trainable={})",
            self.spec.backbone, self.spec.num_classes, counts.total, counts.trainable
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduced_spec() -> ModelSpec {
        ModelSpec {
            backbone: BackboneArch::Reduced,
            ..ModelSpec::default()
        }
    }

    fn build(spec: &ModelSpec, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_resnet18(spec, &mut rng).unwrap()
    }

    #[test]
    fn head_parameter_count_is_closed_form() {
        // 512·500+500 + 500·100+100 + 100·9+9
        let model = build(&ModelSpec::default(), 0);
        let head_total: usize = model
            .count_params()
            .per_tensor
            .iter()
            .filter(|(name, _)| name.starts_with("head."))
            .map(|(_, count)| count)
            .sum();
        assert_eq!(head_total, 307_509);
    }

    #[test]
    fn backbone_feature_width_is_512() {
        let model = build(&ModelSpec::default(), 0);
        assert_eq!(model.feature_width(), 512);
    }

    #[test]
    fn freezing_changes_trainable_count_only() {
        let free = build(&ModelSpec::default(), 0);
        let frozen = build(
            &ModelSpec {
                freeze_backbone: true,
                ..ModelSpec::default()
            },
            0,
        );
        let a = free.count_params();
        let b = frozen.count_params();
        assert_eq!(a.total, b.total);
        assert_eq!(a.trainable, a.total);
        assert_eq!(b.trainable, 307_509);
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let model = build(&reduced_spec(), 1);
        let names: Vec<&str> = model.tensors().map(|(name, _)| name).collect();
        let mut deduped = names.clone();
        deduped.sort();
        deduped.dedup();
        assert_eq!(deduped.len(), names.len());
        assert!(names.contains(&"backbone.conv1.weight"));
        assert!(names.contains(&"backbone.layer2.0.downsample.conv.weight"));
        assert!(names.contains(&"head.fc3.bias"));
        // layer1 keeps its width: no projection shortcut
        assert!(!names.contains(&"backbone.layer1.0.downsample.conv.weight"));
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let a = build(&reduced_spec(), 7);
        let b = build(&reduced_spec(), 7);
        for ((_, ta), (_, tb)) in a.tensors().zip(b.tensors()) {
            assert!(ta.bit_eq(tb));
        }
    }

    #[test]
    fn forward_emits_log_probabilities() {
        let mut model = build(&reduced_spec(), 2);
        model.set_mode(Mode::Eval);
        let batch = Tensor::full(vec![2, 3, 224, 224], 0.25f32);
        let out = model.infer(&batch).unwrap();
        assert_eq!(out.shape(), &[2, 9]);
        for row in out.data().chunks(9) {
            let total: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            assert!((total - 1.0).abs() < 1e-5, "row sums to {total}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_respects_permutation() {
        let model = build(&reduced_spec(), 3);
        let mut data = vec![0.0f32; 2 * 3 * 224 * 224];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i % 97) as f32) / 97.0 - 0.5;
        }
        let batch = Tensor::from_vec(vec![2, 3, 224, 224], data.clone()).unwrap();
        let out1 = model.infer(&batch).unwrap();
        let out2 = model.infer(&batch).unwrap();
        assert!(out1.bit_eq(&out2));

        // Swap the two samples: outputs swap identically.
        let half = data.len() / 2;
        let mut swapped = data[half..].to_vec();
        swapped.extend_from_slice(&data[..half]);
        let batch_swapped = Tensor::from_vec(vec![2, 3, 224, 224], swapped).unwrap();
        let out_swapped = model.infer(&batch_swapped).unwrap();
        assert_eq!(out_swapped.data()[9..18], out1.data()[0..9]);
        assert_eq!(out_swapped.data()[0..9], out1.data()[9..18]);
    }

    #[test]
    fn train_mode_dropout_decorrelates_runs() {
        let mut model = build(&reduced_spec(), 4);
        model.set_mode(Mode::Train);
        let batch = Tensor::full(vec![2, 3, 224, 224], 0.5f32);
        let mut graph = Graph::new();
        let first = model.forward(&mut graph, &batch).unwrap();
        let first_out = graph.value(first.output).clone();
        let mut graph2 = Graph::new();
        let second = model.forward(&mut graph2, &batch).unwrap();
        let second_out = graph2.value(second.output).clone();
        assert!(!first_out.bit_eq(&second_out), "dropout masks should differ");
    }

    #[test]
    fn wrong_spatial_size_is_a_shape_error() {
        let mut model = build(&reduced_spec(), 5);
        let mut graph = Graph::new();
        let bad = Tensor::zeros(vec![1, 3, 128, 128]);
        assert!(matches!(
            model.forward(&mut graph, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zeroed_residual_branch_reduces_to_relu_of_input() {
        // Standalone non-downsampling block: zero both conv weights, eval
        // mode with identity statistics → block(x) = relu(x + bn2(0)) =
        // relu(x).
        let mut model = build(&reduced_spec(), 6);
        model.set_mode(Mode::Eval);
        let block = model.arch.stages[0][0].clone();
        assert!(block.downsample.is_none());
        let width = model.spec.backbone.stage_widths()[0];
        for conv in [&block.conv1, &block.conv2] {
            let name = model.entries[conv.weight.0].name.clone();
            let shape = model.entries[conv.weight.0].value.shape().to_vec();
            model.set_tensor(&name, Tensor::zeros(shape)).unwrap();
        }
        let mut graph = Graph::new();
        let x_data: Vec<f32> = (0..width * 16).map(|i| (i as f32) * 0.11 - 3.0).collect();
        let x_tensor = Tensor::from_vec(vec![1, width, 4, 4], x_data.clone()).unwrap();
        let x = graph.leaf(x_tensor, false);
        let mut pass = ForwardPass {
            output: x,
            param_vars: Vec::new(),
        };
        let out = model
            .block_forward(&mut graph, &mut pass, block, x, Mode::Eval)
            .unwrap();
        let expected: Vec<f32> = x_data.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(graph.value(out).data(), expected.as_slice());
    }
}
