//! Framework-agnostic model description.
//!
//! A model document is a flat list of layers. Parsing folds every
//! non-parametric layer into the parametric layer before it, producing an
//! ordered list of [`LayerBlock`]s. Each block gets a role (input, hidden or
//! output) and a [`LayerKey`], the identity under which blocks share one
//! fitted energy surface. Channel widths are not part of the key: they are the
//! coordinates the surface is fitted over.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    FullyConnected,
    Embedding,
    LstmCell,
    AttentionEncoder,
    BatchNorm,
    MaxPool,
    Dropout,
    Relu,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv2d,
        LayerKind::FullyConnected,
        LayerKind::Embedding,
        LayerKind::LstmCell,
        LayerKind::AttentionEncoder,
        LayerKind::BatchNorm,
        LayerKind::MaxPool,
        LayerKind::Dropout,
        LayerKind::Relu,
        LayerKind::Flatten,
    ];

    /// Parametric layers own weights and anchor a block.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d
                | LayerKind::FullyConnected
                | LayerKind::Embedding
                | LayerKind::LstmCell
                | LayerKind::AttentionEncoder
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Embedding => "embedding",
            LayerKind::LstmCell => "lstm_cell",
            LayerKind::AttentionEncoder => "attention_encoder",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::MaxPool => "max_pool",
            LayerKind::Dropout => "dropout",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::MalformedModel(format!("unknown layer kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Hidden,
    Output,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Hidden => "hidden",
            Role::Output => "output",
        }
    }

    /// Number of channel axes a surface for this role is fitted over.
    pub fn dims(self) -> usize {
        match self {
            Role::Hidden => 2,
            Role::Input | Role::Output => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Channel axis of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    In,
    Out,
}

/// A point in channel space: one width for input/output blocks, `(in, out)`
/// for hidden blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub enum Coord {
    One(u32),
    Two(u32, u32),
}

impl Coord {
    pub fn dims(&self) -> usize {
        match self {
            Coord::One(_) => 1,
            Coord::Two(..) => 2,
        }
    }

    pub fn get(&self, axis: usize) -> u32 {
        match (self, axis) {
            (Coord::One(c), 0) => *c,
            (Coord::Two(a, _), 0) => *a,
            (Coord::Two(_, b), 1) => *b,
            _ => panic!("axis {axis} out of range for {self:?}"),
        }
    }

    pub fn with(&self, axis: usize, value: u32) -> Coord {
        match (self, axis) {
            (Coord::One(_), 0) => Coord::One(value),
            (Coord::Two(_, b), 0) => Coord::Two(value, *b),
            (Coord::Two(a, _), 1) => Coord::Two(*a, value),
            _ => panic!("axis {axis} out of range for {self:?}"),
        }
    }

    pub fn to_vec(&self) -> Vec<u32> {
        match self {
            Coord::One(c) => alloc::vec![*c],
            Coord::Two(a, b) => alloc::vec![*a, *b],
        }
    }

    /// Writes the coordinate as floats into `out`, returning the used prefix.
    pub fn write_f64<'a>(&self, out: &'a mut [f64; 2]) -> &'a [f64] {
        match self {
            Coord::One(c) => {
                out[0] = f64::from(*c);
                &out[..1]
            }
            Coord::Two(a, b) => {
                out[0] = f64::from(*a);
                out[1] = f64::from(*b);
                &out[..2]
            }
        }
    }
}

impl TryFrom<Vec<u32>> for Coord {
    type Error = String;

    fn try_from(v: Vec<u32>) -> core::result::Result<Self, String> {
        match v.as_slice() {
            [c] => Ok(Coord::One(*c)),
            [a, b] => Ok(Coord::Two(*a, *b)),
            _ => Err(format!("coordinate must have 1 or 2 entries, got {}", v.len())),
        }
    }
}

impl From<Coord> for Vec<u32> {
    fn from(c: Coord) -> Self {
        c.to_vec()
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coord::One(c) => write!(f, "{c}"),
            Coord::Two(a, b) => write!(f, "({a},{b})"),
        }
    }
}

/// Inclusive per-axis channel ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bounds(pub Vec<(u32, u32)>);

impl Bounds {
    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, c: &Coord) -> bool {
        c.dims() == self.dims()
            && self
                .0
                .iter()
                .enumerate()
                .all(|(axis, (lo, hi))| (*lo..=*hi).contains(&c.get(axis)))
    }

    pub fn lo(&self) -> Coord {
        self.corner(&[false, false])
    }

    pub fn hi(&self) -> Coord {
        self.corner(&[true, true])
    }

    /// Corner selecting hi on every axis where `upper[axis]` is set.
    pub fn corner(&self, upper: &[bool]) -> Coord {
        let pick = |axis: usize| {
            let (lo, hi) = self.0[axis];
            if upper[axis] {
                hi
            } else {
                lo
            }
        };
        match self.dims() {
            1 => Coord::One(pick(0)),
            _ => Coord::Two(pick(0), pick(1)),
        }
    }

    /// Elementwise maximum of the upper ends; lower ends are kept.
    pub fn widen_to(&mut self, c: &Coord) {
        for (axis, (_, hi)) in self.0.iter_mut().enumerate() {
            *hi = (*hi).max(c.get(axis));
        }
    }
}

/// One entry of a model document's `layers` array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLayer {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
}

impl RawLayer {
    pub fn bare(kind: LayerKind) -> Self {
        RawLayer {
            kind,
            kernel_size: None,
            stride: None,
            in_channels: None,
            out_channels: None,
            height: None,
            width: None,
        }
    }
}

/// The serialized model document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub name: String,
    pub iterations: u64,
    pub batch_size: u32,
    pub layers: Vec<RawLayer>,
}

/// A parametric layer together with the non-parametric layers that follow it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub role: Role,
    pub kind: LayerKind,
    pub kernel_size: Option<u32>,
    pub stride: Option<u32>,
    pub in_channels: u32,
    pub out_channels: u32,
    /// Spatial extent of the anchor layer's input.
    pub spatial: (u32, u32),
    pub batch_size: u32,
    pub attached: Vec<RawLayer>,
}

impl LayerBlock {
    pub fn key(&self) -> LayerKey {
        LayerKey {
            role: self.role,
            kind: self.kind,
            kernel_size: self.kernel_size,
            stride: self.stride,
            spatial: self.spatial,
            batch_size: self.batch_size,
            attached: self.attached.iter().map(|l| l.kind).collect(),
        }
    }

    /// Input blocks are characterized by their output width, output blocks by
    /// their input width and hidden blocks by both.
    pub fn coordinate(&self) -> Coord {
        match self.role {
            Role::Input => Coord::One(self.out_channels),
            Role::Output => Coord::One(self.in_channels),
            Role::Hidden => Coord::Two(self.in_channels, self.out_channels),
        }
    }

    /// Width along `axis`.
    pub fn width(&self, axis: Axis) -> u32 {
        match axis {
            Axis::In => self.in_channels,
            Axis::Out => self.out_channels,
        }
    }

    /// Axes that form the block's coordinate, in coordinate order.
    pub fn coordinate_axes(&self) -> &'static [Axis] {
        match self.role {
            Role::Input => &[Axis::Out],
            Role::Output => &[Axis::In],
            Role::Hidden => &[Axis::In, Axis::Out],
        }
    }

    fn anchor_layer(&self) -> RawLayer {
        let (height, width) = if self.spatial == (1, 1) {
            (None, None)
        } else {
            (Some(self.spatial.0), Some(self.spatial.1))
        };
        RawLayer {
            kind: self.kind,
            kernel_size: self.kernel_size,
            stride: self.stride,
            in_channels: Some(self.in_channels),
            out_channels: Some(self.out_channels),
            height,
            width,
        }
    }
}

/// Identity of a population of structurally identical blocks.
///
/// The textual form (`role:kind:kK:sS:HxW:bB:attached`) is used as the key in
/// every persisted file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerKey {
    pub role: Role,
    pub kind: LayerKind,
    pub kernel_size: Option<u32>,
    pub stride: Option<u32>,
    pub spatial: (u32, u32),
    pub batch_size: u32,
    pub attached: Vec<LayerKind>,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:", self.role, self.kind)?;
        match self.kernel_size {
            Some(k) => write!(f, "k{k}:")?,
            None => f.write_str("k-:")?,
        }
        match self.stride {
            Some(s) => write!(f, "s{s}:")?,
            None => f.write_str("s-:")?,
        }
        write!(f, "{}x{}:b{}:", self.spatial.0, self.spatial.1, self.batch_size)?;
        if self.attached.is_empty() {
            f.write_str("-")
        } else {
            for (i, kind) in self.attached.iter().enumerate() {
                if i > 0 {
                    f.write_str("+")?;
                }
                f.write_str(kind.as_str())?;
            }
            Ok(())
        }
    }
}

impl FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MalformedModel(format!("malformed layer key `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let [role, kind, kernel, stride, spatial, batch, attached] = parts.as_slice() else {
            return Err(bad());
        };
        let role = match *role {
            "input" => Role::Input,
            "hidden" => Role::Hidden,
            "output" => Role::Output,
            _ => return Err(bad()),
        };
        let opt = |field: &str, prefix: char| -> Result<Option<u32>> {
            let rest = field.strip_prefix(prefix).ok_or_else(bad)?;
            if rest == "-" {
                Ok(None)
            } else {
                rest.parse().map(Some).map_err(|_| bad())
            }
        };
        let (h, w) = spatial.split_once('x').ok_or_else(bad)?;
        let attached = if *attached == "-" {
            Vec::new()
        } else {
            attached
                .split('+')
                .map(LayerKind::from_str)
                .collect::<Result<Vec<_>>>()?
        };
        Ok(LayerKey {
            role,
            kind: kind.parse()?,
            kernel_size: opt(kernel, 'k')?,
            stride: opt(stride, 's')?,
            spatial: (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
            batch_size: batch
                .strip_prefix('b')
                .and_then(|b| b.parse().ok())
                .ok_or_else(bad)?,
            attached,
        })
    }
}

impl From<LayerKey> for String {
    fn from(k: LayerKey) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for LayerKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// An ordered chain of layer blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub blocks: Vec<LayerBlock>,
    pub iterations: u64,
}

impl ModelSpec {
    /// Builds a model from a parsed document, folding non-parametric layers
    /// into the preceding parametric layer and assigning roles.
    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.iterations == 0 {
            return Err(Error::MalformedModel("iterations must be positive".to_owned()));
        }
        if doc.batch_size == 0 {
            return Err(Error::MalformedModel("batch_size must be positive".to_owned()));
        }
        let mut blocks: Vec<LayerBlock> = Vec::new();
        for (index, layer) in doc.layers.iter().enumerate() {
            if !layer.kind.is_parametric() {
                if layer.in_channels.is_some() || layer.out_channels.is_some() {
                    return Err(Error::MalformedModel(format!(
                        "layer {index} ({}) is non-parametric and must not declare channels",
                        layer.kind
                    )));
                }
                match blocks.last_mut() {
                    Some(block) => block.attached.push(layer.clone()),
                    None => return Err(Error::OrphanLayer { index }),
                }
                continue;
            }
            let channel = |c: Option<u32>, what: &str| match c {
                Some(c) if c >= 1 => Ok(c),
                _ => Err(Error::MalformedModel(format!(
                    "layer {index} ({}) needs a positive {what}",
                    layer.kind
                ))),
            };
            let in_channels = channel(layer.in_channels, "in_channels")?;
            let out_channels = channel(layer.out_channels, "out_channels")?;
            let spatial = match (layer.height, layer.width) {
                (None, None) => (1, 1),
                (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
                _ => {
                    return Err(Error::MalformedModel(format!(
                        "layer {index}: height and width must both be positive or both absent"
                    )))
                }
            };
            let (kernel_size, stride) = if layer.kind == LayerKind::Conv2d {
                let k = layer.kernel_size.ok_or_else(|| {
                    Error::MalformedModel(format!("conv2d layer {index} needs kernel_size"))
                })?;
                let s = layer.stride.unwrap_or(1);
                if k == 0 || s == 0 {
                    return Err(Error::MalformedModel(format!(
                        "conv2d layer {index}: kernel_size and stride must be positive"
                    )));
                }
                (Some(k), Some(s))
            } else {
                if layer.kernel_size.is_some() || layer.stride.is_some() {
                    return Err(Error::MalformedModel(format!(
                        "layer {index} ({}) does not take kernel_size/stride",
                        layer.kind
                    )));
                }
                (None, None)
            };
            if layer.kind == LayerKind::Embedding && !blocks.is_empty() {
                return Err(Error::MalformedModel(format!(
                    "embedding layer {index} must be the first parametric layer"
                )));
            }
            blocks.push(LayerBlock {
                role: Role::Hidden,
                kind: layer.kind,
                kernel_size,
                stride,
                in_channels,
                out_channels,
                spatial,
                batch_size: doc.batch_size,
                attached: Vec::new(),
            });
        }
        if blocks.is_empty() {
            return Err(Error::NoParametricLayers);
        }
        assign_roles(&mut blocks);
        let model = ModelSpec {
            name: doc.name.clone(),
            blocks,
            iterations: doc.iterations,
        };
        model.check_chain()?;
        Ok(model)
    }

    pub fn to_document(&self) -> ModelDocument {
        let mut layers = Vec::new();
        for block in &self.blocks {
            layers.push(block.anchor_layer());
            layers.extend(block.attached.iter().cloned());
        }
        ModelDocument {
            name: self.name.clone(),
            iterations: self.iterations,
            batch_size: self.batch_size(),
            layers,
        }
    }

    pub fn batch_size(&self) -> u32 {
        self.blocks.first().map_or(1, |b| b.batch_size)
    }

    pub fn check_chain(&self) -> Result<()> {
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::ChannelChain {
                    prev: i,
                    next: i + 1,
                    out_channels: pair[0].out_channels,
                    in_channels: pair[1].in_channels,
                });
            }
        }
        Ok(())
    }

    /// Checks every structural invariant: non-empty, chained, one input and
    /// one output role, only non-parametric layers attached.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::NoParametricLayers);
        }
        self.check_chain()?;
        let count = |role| self.blocks.iter().filter(|b| b.role == role).count();
        let expected_inputs = usize::from(self.blocks.len() > 1);
        if count(Role::Output) != 1 || count(Role::Input) != expected_inputs {
            return Err(Error::MalformedModel("invalid role assignment".to_owned()));
        }
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.in_channels == 0 || block.out_channels == 0 {
                return Err(Error::MalformedModel(format!("block {i} has a zero width")));
            }
            if block.attached.iter().any(|l| l.kind.is_parametric()) {
                return Err(Error::MalformedModel(format!(
                    "block {i} has a parametric layer attached"
                )));
            }
            let role_ok = match block.role {
                Role::Output => i == last,
                Role::Input => i == 0,
                Role::Hidden => i != 0 && i != last,
            };
            if !role_ok {
                return Err(Error::MalformedModel(format!("block {i} has role {}", block.role)));
            }
        }
        Ok(())
    }

    /// Sets the width shared by block `i`'s output and block `i + 1`'s input.
    pub fn set_boundary_width(&mut self, i: usize, width: u32) {
        self.blocks[i].out_channels = width;
        if let Some(next) = self.blocks.get_mut(i + 1) {
            next.in_channels = width;
        }
    }
}

fn assign_roles(blocks: &mut [LayerBlock]) {
    let n = blocks.len();
    for (i, block) in blocks.iter_mut().enumerate() {
        block.role = if i + 1 == n {
            Role::Output
        } else if i == 0 {
            Role::Input
        } else {
            Role::Hidden
        };
    }
}

/// Groups block indices by layer key, in order of first occurrence.
pub fn dedup_keys(model: &ModelSpec) -> Vec<(LayerKey, Vec<usize>)> {
    let mut groups: Vec<(LayerKey, Vec<usize>)> = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        let key = block.key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((key, alloc::vec![i])),
        }
    }
    groups
}

/// Channel range `[1, max original width]` per coordinate axis over the
/// blocks matching `key`.
pub fn channel_bounds(key: &LayerKey, model: &ModelSpec) -> Result<Bounds> {
    let mut bounds: Option<Bounds> = None;
    for block in model.blocks.iter().filter(|b| b.key() == *key) {
        let c = block.coordinate();
        let b = bounds.get_or_insert_with(|| Bounds(alloc::vec![(1, 1); c.dims()]));
        b.widen_to(&c);
    }
    bounds.ok_or_else(|| Error::KeyAbsent(key.clone()))
}
