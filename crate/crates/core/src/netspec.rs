//! Sequential network descriptions: a line-based topology format, shape
//! inference, the CIFAR ResNet generator, filter widening, and the memory
//! footprint and compute-cost analyzers.
//!
//! Topology grammar, one layer per line, `#` starts a comment:
//!
//! ```text
//! input H W C
//! conv name=<id> out=<int> k=<int> [stride=<int>] [pad=<int>]
//! fc name=<id> out=<int>
//! relu
//! pool type=max|avg|global [k=<int>] [stride=<int>]
//! ```
//!
//! Residual connections are not represented; networks are chains.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
    Global,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
            PoolKind::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Input {
        height: usize,
        width: usize,
        channels: usize,
    },
    Conv {
        name: String,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        name: String,
        out_features: usize,
    },
    Relu,
    Pool {
        pool: PoolKind,
        k: usize,
        stride: usize,
    },
}

impl Layer {
    pub fn conv(name: &str, out_channels: usize, k: usize, stride: usize, pad: usize) -> Layer {
        Layer::Conv {
            name: name.to_string(),
            out_channels,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    pub fn fc(name: &str, out_features: usize) -> Layer {
        Layer::Fc {
            name: name.to_string(),
            out_features,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv { .. } => "conv",
            Layer::Fc { .. } => "fc",
            Layer::Relu => "relu",
            Layer::Pool { .. } => "pool",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Fc { .. })
    }
}

/// Spatial extent and channel count of an activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Per-layer facts derived by shape inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub input: Shape,
    pub output: Shape,
    pub params: u64,
    pub fmas: u64,
}

/// A validated chain of layers.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkSpec {
    name: String,
    layers: Vec<Layer>,
    #[serde(skip)]
    info: Vec<LayerInfo>,
}

impl PartialEq for NetworkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.layers == other.layers
    }
}

fn geometry(layer: &str, message: impl Into<String>) -> Error {
    Error::LayerGeometry {
        layer: layer.to_string(),
        message: message.into(),
    }
}

fn window_out(name: &str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(geometry(name, "kernel and stride must be at least 1"));
    }
    let padded = size + 2 * pad;
    if k > padded {
        return Err(geometry(
            name,
            format!("kernel {k} exceeds padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn infer(layers: &[Layer]) -> Result<Vec<LayerInfo>> {
    let mut info = Vec::with_capacity(layers.len());
    let mut cur = match layers.first() {
        Some(Layer::Input {
            height,
            width,
            channels,
        }) => Shape {
            height: *height,
            width: *width,
            channels: *channels,
        },
        _ => return Err(Error::MissingInput),
    };
    if cur.elements() == 0 {
        return Err(geometry("input", "input dims must be at least 1"));
    }
    for (idx, layer) in layers.iter().enumerate() {
        let input = cur;
        let (name, out, params, fmas) = match layer {
            Layer::Input { .. } => {
                if idx != 0 {
                    return Err(geometry("input", format!("second input at layer {idx}")));
                }
                ("input".to_string(), cur, 0u64, 0u64)
            }
            Layer::Conv {
                name,
                out_channels,
                kh,
                kw,
                stride,
                pad,
            } => {
                if *out_channels == 0 {
                    return Err(geometry(name, "out channels must be at least 1"));
                }
                let oh = window_out(name, input.height, *kh, *stride, *pad)?;
                let ow = window_out(name, input.width, *kw, *stride, *pad)?;
                let out = Shape {
                    height: oh,
                    width: ow,
                    channels: *out_channels,
                };
                let params = (kh * kw * input.channels * out_channels) as u64;
                let fmas = (oh * ow) as u64 * params;
                (name.clone(), out, params, fmas)
            }
            Layer::Fc { name, out_features } => {
                if *out_features == 0 {
                    return Err(geometry(name, "out features must be at least 1"));
                }
                let out = Shape {
                    height: 1,
                    width: 1,
                    channels: *out_features,
                };
                let params = (input.elements() * out_features) as u64;
                (name.clone(), out, params, params)
            }
            Layer::Relu => (format!("relu{idx}"), cur, 0, 0),
            Layer::Pool { pool, k, stride } => {
                let name = format!("pool{idx}");
                let out = match pool {
                    PoolKind::Global => Shape {
                        height: 1,
                        width: 1,
                        channels: input.channels,
                    },
                    PoolKind::Max | PoolKind::Avg => Shape {
                        height: window_out(&name, input.height, *k, *stride, 0)?,
                        width: window_out(&name, input.width, *k, *stride, 0)?,
                        channels: input.channels,
                    },
                };
                (name, out, 0, 0)
            }
        };
        info.push(LayerInfo {
            name,
            kind: layer.kind().to_string(),
            input,
            output: out,
            params,
            fmas,
        });
        cur = out;
    }
    Ok(info)
}

impl NetworkSpec {
    /// Validates the chain and runs shape inference.
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let info = infer(&layers)?;
        Ok(NetworkSpec {
            name: name.into(),
            layers,
            info,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn info(&self) -> &[LayerInfo] {
        &self.info
    }

    pub fn input_shape(&self) -> Shape {
        self.info[0].output
    }

    pub fn output_shape(&self) -> Shape {
        self.info[self.info.len() - 1].output
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count()
    }

    pub fn weighted_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn total_params(&self) -> u64 {
        self.info.iter().map(|i| i.params).sum()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Renders the spec in the topology grammar.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", self.name);
        for layer in &self.layers {
            match layer {
                Layer::Input {
                    height,
                    width,
                    channels,
                } => s.push_str(&format!("input {height} {width} {channels}\n")),
                Layer::Conv {
                    name,
                    out_channels,
                    kh,
                    kw,
                    stride,
                    pad,
                } => {
                    let kernel = if kh == kw {
                        format!("k={kh}")
                    } else {
                        format!("kh={kh} kw={kw}")
                    };
                    s.push_str(&format!(
                        "conv name={name} out={out_channels} {kernel} stride={stride} pad={pad}\n"
                    ));
                }
                Layer::Fc { name, out_features } => {
                    s.push_str(&format!("fc name={name} out={out_features}\n"))
                }
                Layer::Relu => s.push_str("relu\n"),
                Layer::Pool { pool, k, stride } => match pool {
                    PoolKind::Global => s.push_str("pool type=global\n"),
                    _ => s.push_str(&format!("pool type={} k={k} stride={stride}\n", pool.as_str())),
                },
            }
        }
        s
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

struct Line<'a> {
    number: usize,
    keys: BTreeMap<&'a str, &'a str>,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Syntax {
            line: self.number,
            message: message.into(),
        }
    }

    fn take_str(&mut self, key: &str) -> Result<Option<String>> {
        Ok(self.keys.remove(key).map(str::to_string))
    }

    fn take_int(&mut self, key: &str) -> Result<Option<usize>> {
        match self.keys.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}` expects a non-negative integer, got `{v}`"))),
        }
    }

    fn require_int(&mut self, key: &str) -> Result<usize> {
        self.take_int(key)?
            .ok_or_else(|| self.err(format!("missing `{key}=`")))
    }

    fn finish(self) -> Result<()> {
        match self.keys.keys().next() {
            Some(k) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Parses a topology with the given network name.
pub fn parse_topology_named(name: &str, text: &str) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let number = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let directive = tokens.next().unwrap_or_default();
        let syntax = |message: String| Error::Syntax {
            line: number,
            message,
        };

        if directive == "input" {
            let dims: Vec<&str> = tokens.collect();
            if dims.len() != 3 {
                return Err(syntax("`input` expects H W C".into()));
            }
            let mut parsed = [0usize; 3];
            for (slot, d) in parsed.iter_mut().zip(&dims) {
                *slot = d
                    .parse()
                    .map_err(|_| syntax(format!("bad input dimension `{d}`")))?;
            }
            if !layers.is_empty() {
                return Err(syntax("`input` must be the first layer".into()));
            }
            layers.push(Layer::Input {
                height: parsed[0],
                width: parsed[1],
                channels: parsed[2],
            });
            continue;
        }

        let mut keys = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got `{tok}`")))?;
            if keys.insert(k, v).is_some() {
                return Err(syntax(format!("duplicate key `{k}`")));
            }
        }
        let mut line = Line { number, keys };
        if layers.is_empty() {
            return Err(Error::MissingInput);
        }
        let layer = match directive {
            "conv" => {
                let name = line
                    .take_str("name")?
                    .ok_or_else(|| line.err("missing `name=`"))?;
                let out_channels = line.require_int("out")?;
                let k = line.take_int("k")?;
                let kh = line.take_int("kh")?.or(k);
                let kw = line.take_int("kw")?.or(k);
                let (kh, kw) = match (kh, kw) {
                    (Some(kh), Some(kw)) => (kh, kw),
                    _ => return Err(line.err("missing `k=`")),
                };
                let stride = line.take_int("stride")?.unwrap_or(1);
                let pad = line.take_int("pad")?.unwrap_or(0);
                Layer::Conv {
                    name,
                    out_channels,
                    kh,
                    kw,
                    stride,
                    pad,
                }
            }
            "fc" => {
                let name = line
                    .take_str("name")?
                    .ok_or_else(|| line.err("missing `name=`"))?;
                let out_features = line.require_int("out")?;
                Layer::Fc { name, out_features }
            }
            "relu" => Layer::Relu,
            "pool" => {
                let pool = match line.take_str("type")?.as_deref() {
                    Some("max") => PoolKind::Max,
                    Some("avg") => PoolKind::Avg,
                    Some("global") => PoolKind::Global,
                    Some(other) => return Err(line.err(format!("unknown pool type `{other}`"))),
                    None => return Err(line.err("missing `type=`")),
                };
                let k = line.take_int("k")?;
                let stride = line.take_int("stride")?;
                match pool {
                    // Global pooling has no window; k/stride are accepted and ignored.
                    PoolKind::Global => Layer::Pool { pool, k: 1, stride: 1 },
                    _ => {
                        let k = k.unwrap_or(2);
                        Layer::Pool { pool, k, stride: stride.unwrap_or(k) }
                    }
                }
            }
            other => return Err(line.err(format!("unknown layer `{other}`"))),
        };
        line.finish()?;
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(Error::MissingInput);
    }
    let mut seen = std::collections::HashSet::new();
    for l in &layers {
        if let Layer::Conv { name, .. } | Layer::Fc { name, .. } = l {
            if !seen.insert(name.as_str()) {
                return Err(geometry(name, "duplicate layer name"));
            }
        }
    }
    NetworkSpec::new(name, layers)
}

pub fn parse_topology(text: &str) -> Result<NetworkSpec> {
    parse_topology_named("network", text)
}

/// CIFAR ResNet chain with `6n + 2` weighted layers: a 3x3/16 stem, three
/// stages of `2n` 3x3 convolutions at 16, 32 and 64 filters on 32x32, 16x16
/// and 8x8 maps, global average pooling and a 10-way classifier.
pub fn resnet_cifar(n: usize) -> Result<NetworkSpec> {
    if n < 1 {
        return Err(Error::InvalidSpec("resnet depth parameter n must be >= 1".into()));
    }
    let mut layers = vec![
        Layer::Input {
            height: 32,
            width: 32,
            channels: 3,
        },
        Layer::conv("conv1", 16, 3, 1, 1),
        Layer::Relu,
    ];
    for (stage, filters) in [16usize, 32, 64].into_iter().enumerate() {
        for i in 0..2 * n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            layers.push(Layer::conv(
                &format!("s{}_c{}", stage + 1, i + 1),
                filters,
                3,
                stride,
                1,
            ));
            layers.push(Layer::Relu);
        }
    }
    layers.push(Layer::Pool {
        pool: PoolKind::Global,
        k: 1,
        stride: 1,
    });
    layers.push(Layer::fc("fc", 10));
    NetworkSpec::new(format!("resnet{}-cifar", 6 * n + 2), layers)
}

/// Number of leading conv layers widened for a given fraction.
pub fn widened_count(conv_layers: usize, fraction: f64) -> usize {
    // Guard against products such as 0.3 * 10 = 3.0000000000000004.
    let c = (fraction * conv_layers as f64 - 1e-9).ceil();
    (c.max(1.0) as usize).min(conv_layers)
}

/// Multiplies the filter count of the first `ceil(fraction * #conv)` conv
/// layers by `factor`; downstream input widths follow by inference.
pub fn widen(spec: &NetworkSpec, factor: f64, fraction: f64) -> Result<NetworkSpec> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidSpec(format!("widening factor {factor} must be >= 1")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!("widening fraction {fraction} must be in (0, 1]")));
    }
    let target = widened_count(spec.conv_count(), fraction);
    let mut seen = 0;
    let layers = spec
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv {
                name,
                out_channels,
                kh,
                kw,
                stride,
                pad,
            } => {
                seen += 1;
                let out_channels = if seen <= target {
                    ((*out_channels as f64 * factor).round() as usize).max(1)
                } else {
                    *out_channels
                };
                Layer::Conv {
                    name: name.clone(),
                    out_channels,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                }
            }
            other => other.clone(),
        })
        .collect();
    let name = if factor == 1.0 {
        spec.name.clone()
    } else {
        format!("{}-w{}x{}", spec.name, factor, fraction)
    };
    NetworkSpec::new(name, layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(Mode::Training),
            "inference" | "infer" => Ok(Mode::Inference),
            _ => Err(Error::InvalidSpec(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub weight_bytes: u64,
    pub output_elements: u64,
    /// Training: bytes of this layer's retained output. Inference: bytes of
    /// the live set (input plus output) while this layer runs.
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub network: String,
    pub batch: u64,
    pub mode: Mode,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub per_layer: Vec<LayerFootprint>,
}

fn bytes(count: u64, bits: u32) -> u64 {
    (count * bits as u64).div_ceil(8)
}

/// Weight and activation memory.
///
/// Training keeps every layer output (the input image included) for the
/// backward pass; inference needs only the largest input+output pair alive
/// at once. Optimizer state and gradients are not counted.
pub fn footprint(spec: &NetworkSpec, batch: usize, mode: Mode, quant: QuantSpec) -> Result<FootprintReport> {
    if batch == 0 {
        return Err(Error::InvalidSpec("batch must be >= 1".into()));
    }
    let b = batch as u64;
    let per_layer: Vec<LayerFootprint> = spec
        .info
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let out = l.output.elements() as u64;
            let live = match mode {
                Mode::Training => out,
                Mode::Inference if i == 0 => out,
                Mode::Inference => l.input.elements() as u64 + out,
            };
            LayerFootprint {
                name: l.name.clone(),
                kind: l.kind.clone(),
                params: l.params,
                weight_bytes: bytes(l.params, quant.weight_bits()),
                output_elements: out,
                activation_bytes: bytes(b * live, quant.act_bits()),
            }
        })
        .collect();
    let weight_bytes = per_layer.iter().map(|l| l.weight_bytes).sum();
    let activation_bytes = match mode {
        Mode::Training => per_layer.iter().map(|l| l.activation_bytes).sum(),
        Mode::Inference => per_layer.iter().map(|l| l.activation_bytes).max().unwrap_or(0),
    };
    Ok(FootprintReport {
        network: spec.name.clone(),
        batch: b,
        mode,
        weight_bits: quant.weight_bits(),
        act_bits: quant.act_bits(),
        weight_bytes,
        activation_bytes,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub fmas: u64,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub total_fmas: u64,
    pub cost: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// `self.cost / baseline.cost`.
    pub fn ratio_to(&self, baseline: &CostReport) -> f64 {
        self.cost as f64 / baseline.cost as f64
    }
}

/// Per-image compute cost: FMA count times the summed operand widths.
pub fn compute_cost(spec: &NetworkSpec, quant: QuantSpec) -> CostReport {
    let width = (quant.weight_bits() + quant.act_bits()) as u64;
    let per_layer: Vec<LayerCost> = spec
        .info
        .iter()
        .filter(|l| l.fmas > 0)
        .map(|l| LayerCost {
            name: l.name.clone(),
            fmas: l.fmas,
            cost: l.fmas * width,
        })
        .collect();
    CostReport {
        network: spec.name.clone(),
        weight_bits: quant.weight_bits(),
        act_bits: quant.act_bits(),
        total_fmas: per_layer.iter().map(|l| l.fmas).sum(),
        cost: per_layer.iter().map(|l| l.cost).sum(),
        per_layer,
    }
}

const RESNET50: &str = include_str!("../assets/resnet50.net");
const ALEXNET: &str = include_str!("../assets/alexnet.net");
const RESNET44: &str = include_str!("../assets/r44.net");
const RESNET56: &str = include_str!("../assets/r56.net");

/// Names of the topologies shipped with the crate.
pub const BUNDLED: [&str; 4] = ["resnet50", "alexnet", "r44", "r56"];

/// Looks up a shipped topology by name, with or without a `.net` suffix.
pub fn bundled(name: &str) -> Option<NetworkSpec> {
    let stem = name.strip_suffix(".net").unwrap_or(name);
    let text = match stem {
        "resnet50" => RESNET50,
        "alexnet" => ALEXNET,
        "r44" => RESNET44,
        "r56" => RESNET56,
        _ => return None,
    };
    Some(parse_topology_named(stem, text).expect("bundled topology parses"))
}
