use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::MarginConstants;
use crate::imaging::PreprocConfig;

/// One convolution + bias + ReLU stage of a built-in conv base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ConvLayerSpec {
    pub const fn new(filters: usize, kernel: usize) -> Self {
        Self {
            filters,
            kernel,
            stride: 1,
        }
    }
}

impl fmt::Display for ConvLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}x{})", self.filters, self.kernel, self.kernel)?;
        if self.stride != 1 {
            write!(f, "/s{}", self.stride)?;
        }
        Ok(())
    }
}

/// Feature extractor in front of the primary capsules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvBaseSpec {
    /// Sequential conv stack trained with the capsule head.
    Builtin { layers: Vec<ConvLayerSpec> },
    /// Parallel branches over the input, center-cropped to the smallest
    /// output and concatenated along channels.
    MultiScale { branches: Vec<ConvLayerSpec> },
    /// Frozen precomputed feature maps of shape [C,H,W].
    External { feature_shape: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCapsSpec {
    pub channels: usize,
    pub dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for PrimaryCapsSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            dim: 8,
            kernel: 9,
            stride: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCapsSpec {
    pub num_classes: usize,
    pub dim: usize,
}

impl Default for ClassCapsSpec {
    fn default() -> Self {
        Self { num_classes: 2, dim: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginSpec {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

impl From<MarginSpec> for MarginConstants {
    fn from(m: MarginSpec) -> Self {
        MarginConstants {
            m_plus: m.m_plus,
            m_minus: m.m_minus,
            lambda: m.lambda_down,
        }
    }
}

/// Full architecture description, embedded verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsNetConfig {
    pub conv_base: ConvBaseSpec,
    pub preproc: PreprocConfig,
    pub primary_caps: PrimaryCapsSpec,
    pub class_caps: ClassCapsSpec,
    pub routing_iters: usize,
    pub margin: MarginSpec,
    pub seed: u64,
}

/// Named conv bases from the ablation table plus the external mode.
pub const VARIANTS: &[(&str, &str)] = &[
    ("caps-256x9", "256(9x9)"),
    ("caps-128x9", "128(9x9)"),
    ("caps-64x9", "64(9x9)"),
    ("caps-64x7", "64(7x7)"),
    ("caps-128x9-64x9", "128(9x9), 64(9x9)"),
    ("caps-ms-32x3-64x5-128x7", "multi-scale 32(3x3), 64(5x5), 128(7x7)"),
    ("external", "precomputed feature maps"),
];

impl ConvBaseSpec {
    /// Resolves a variant name: `external` (needs the feature shape),
    /// `caps-<F>x<K>[-<F>x<K>...]` for a sequential stack, or
    /// `caps-ms-<F>x<K>-...` for parallel branches.
    pub fn from_variant(name: &str, feature_shape: Option<[usize; 3]>) -> Result<Self, ModelError> {
        if name == "external" {
            return Ok(ConvBaseSpec::External {
                feature_shape: feature_shape
                    .ok_or_else(|| ModelError::Config("variant `external` needs a feature file".into()))?,
            });
        }
        let unknown = || {
            let known: Vec<_> = VARIANTS.iter().map(|(n, _)| *n).collect();
            ModelError::Config(format!(
                "unknown conv-base variant `{name}` (known: {}, or caps-<F>x<K>[-<F>x<K>...])",
                known.join(", ")
            ))
        };
        let body = name.strip_prefix("caps-").ok_or_else(unknown)?;
        let (multi, body) = match body.strip_prefix("ms-") {
            Some(rest) => (true, rest),
            None => (false, body),
        };
        let layers = body
            .split('-')
            .map(|part| {
                let (f, k) = part.split_once('x')?;
                let (f, k) = (f.parse().ok()?, k.parse().ok()?);
                (f > 0 && k > 0).then(|| ConvLayerSpec::new(f, k))
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(unknown)?;
        Ok(if multi {
            ConvBaseSpec::MultiScale { branches: layers }
        } else {
            ConvBaseSpec::Builtin { layers }
        })
    }

    pub fn is_external(&self) -> bool {
        matches!(self, ConvBaseSpec::External { .. })
    }
}

impl fmt::Display for ConvBaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |l: &[ConvLayerSpec]| l.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        match self {
            ConvBaseSpec::Builtin { layers } => f.write_str(&join(layers)),
            ConvBaseSpec::MultiScale { branches } => write!(f, "multi-scale [{}]", join(branches)),
            ConvBaseSpec::External { feature_shape } => write!(f, "external {feature_shape:?}"),
        }
    }
}

/// Spatial bookkeeping of one configured network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionReport {
    pub input: [usize; 3],
    pub stages: Vec<(String, [usize; 3])>,
    pub features: [usize; 3],
    pub primary_grid: (usize, usize),
    pub primary_capsules: usize,
    pub parameters: usize,
}

impl fmt::Display for DimensionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input            {:?}", self.input)?;
        for (name, shape) in &self.stages {
            writeln!(f, "{name:<16} {shape:?}")?;
        }
        writeln!(f, "features         {:?}", self.features)?;
        writeln!(
            f,
            "primary grid     {}x{}",
            self.primary_grid.0, self.primary_grid.1
        )?;
        writeln!(f, "primary capsules {}", self.primary_capsules)?;
        write!(f, "parameters       {}", self.parameters)
    }
}

fn valid_out(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel && stride > 0).then(|| (len - kernel) / stride + 1)
}

impl CapsNetConfig {
    pub fn new(conv_base: ConvBaseSpec, preproc: PreprocConfig) -> Self {
        Self {
            conv_base,
            preproc,
            primary_caps: PrimaryCapsSpec::default(),
            class_caps: ClassCapsSpec::default(),
            routing_iters: 3,
            margin: MarginSpec::default(),
            seed: 0,
        }
    }

    /// 64x64 HE-preprocessed input with the 256(9x9) conv base.
    pub fn baseline() -> Self {
        Self::new(
            ConvBaseSpec::from_variant("caps-256x9", None).expect("known variant"),
            PreprocConfig::default(),
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match &self.conv_base {
            ConvBaseSpec::External { feature_shape } => *feature_shape,
            _ => [3, self.preproc.target_size, self.preproc.target_size],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let check_layer = |l: &ConvLayerSpec| -> Result<(), ModelError> {
            if l.filters == 0 || l.kernel < 3 || l.kernel % 2 == 0 || l.stride == 0 {
                return Err(ModelError::Config(format!(
                    "conv layer {l}: filters must be positive, kernel odd and >= 3, stride positive"
                )));
            }
            Ok(())
        };
        match &self.conv_base {
            ConvBaseSpec::Builtin { layers } | ConvBaseSpec::MultiScale { branches: layers } => {
                if layers.is_empty() {
                    return bad("conv base needs at least one layer".into());
                }
                layers.iter().try_for_each(check_layer)?;
            }
            ConvBaseSpec::External { feature_shape } => {
                if feature_shape.contains(&0) {
                    return bad(format!("external feature shape {feature_shape:?} has a zero dimension"));
                }
            }
        }
        if !self.conv_base.is_external() {
            self.preproc.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        let p = &self.primary_caps;
        if p.channels == 0 || p.dim == 0 || p.kernel == 0 || p.stride == 0 {
            return bad("primary capsule channels, dim, kernel and stride must be >= 1".into());
        }
        if self.class_caps.dim == 0 || self.class_caps.num_classes != 2 {
            return bad(format!(
                "class capsules must be 2 classes of dim >= 1, got {} of dim {}",
                self.class_caps.num_classes, self.class_caps.dim
            ));
        }
        if self.routing_iters < 1 {
            return bad("routing_iters must be at least 1".into());
        }
        let m = &self.margin;
        if !(0.0 < m.m_minus && m.m_minus < m.m_plus && m.m_plus <= 1.0) || m.lambda_down < 0.0 {
            return bad(format!("margin constants need 0 < m- < m+ <= 1, got {m:?}"));
        }
        self.dimensions().map(|_| ())
    }

    /// Computes every intermediate shape, failing on spatial underflow.
    pub fn dimensions(&self) -> Result<DimensionReport, ModelError> {
        let input = self.input_shape();
        let mut stages = Vec::new();
        let mut params = 0;
        let underflow = |what: &str, h: usize, w: usize, k: usize, s: usize| {
            ModelError::Config(format!(
                "{what}: {k}x{k} stride-{s} kernel does not fit {h}x{w} input"
            ))
        };
        let features = match &self.conv_base {
            ConvBaseSpec::External { feature_shape } => *feature_shape,
            ConvBaseSpec::Builtin { layers } => {
                let mut shape = input;
                for (i, l) in layers.iter().enumerate() {
                    let name = format!("conv{i} {l}");
                    let h = valid_out(shape[1], l.kernel, l.stride)
                        .ok_or_else(|| underflow(&name, shape[1], shape[2], l.kernel, l.stride))?;
                    let w = valid_out(shape[2], l.kernel, l.stride)
                        .ok_or_else(|| underflow(&name, shape[1], shape[2], l.kernel, l.stride))?;
                    params += l.filters * shape[0] * l.kernel * l.kernel + l.filters;
                    shape = [l.filters, h, w];
                    stages.push((name, shape));
                }
                shape
            }
            ConvBaseSpec::MultiScale { branches } => {
                let mut channels = 0;
                let (mut min_h, mut min_w) = (usize::MAX, usize::MAX);
                for (i, l) in branches.iter().enumerate() {
                    let name = format!("branch{i} {l}");
                    let h = valid_out(input[1], l.kernel, l.stride)
                        .ok_or_else(|| underflow(&name, input[1], input[2], l.kernel, l.stride))?;
                    let w = valid_out(input[2], l.kernel, l.stride)
                        .ok_or_else(|| underflow(&name, input[1], input[2], l.kernel, l.stride))?;
                    params += l.filters * input[0] * l.kernel * l.kernel + l.filters;
                    channels += l.filters;
                    min_h = min_h.min(h);
                    min_w = min_w.min(w);
                    stages.push((name, [l.filters, h, w]));
                }
                [channels, min_h, min_w]
            }
        };
        let p = &self.primary_caps;
        let gh = valid_out(features[1], p.kernel, p.stride)
            .ok_or_else(|| underflow("primary capsules", features[1], features[2], p.kernel, p.stride))?;
        let gw = valid_out(features[2], p.kernel, p.stride)
            .ok_or_else(|| underflow("primary capsules", features[1], features[2], p.kernel, p.stride))?;
        let primary_capsules = p.channels * gh * gw;
        params += p.channels * p.dim * features[0] * p.kernel * p.kernel + p.channels * p.dim;
        params += primary_capsules * self.class_caps.num_classes * self.class_caps.dim * p.dim;
        Ok(DimensionReport {
            input,
            stages,
            features,
            primary_grid: (gh, gw),
            primary_capsules,
            parameters: params,
        })
    }

    /// A structurally similar network small enough for finite differences:
    /// at most 8x8 input, 3x3 kernels, a handful of channels.
    pub fn shrunk_for_gradcheck(&self) -> Self {
        let shrink = |layers: &[ConvLayerSpec], grow_kernels: bool| -> Vec<ConvLayerSpec> {
            layers
                .iter()
                .enumerate()
                .map(|(i, l)| ConvLayerSpec {
                    filters: l.filters.min(4),
                    kernel: if grow_kernels { 3 + 2 * i.min(1) } else { 3 },
                    stride: 1,
                })
                .collect()
        };
        let conv_base = match &self.conv_base {
            ConvBaseSpec::Builtin { layers } => ConvBaseSpec::Builtin {
                layers: shrink(&layers[..layers.len().min(2)], false),
            },
            ConvBaseSpec::MultiScale { branches } => ConvBaseSpec::MultiScale {
                branches: shrink(&branches[..branches.len().min(2)], true),
            },
            ConvBaseSpec::External { .. } => ConvBaseSpec::External {
                feature_shape: [4, 7, 7],
            },
        };
        Self {
            conv_base,
            preproc: PreprocConfig {
                target_size: 8,
                ..self.preproc
            },
            primary_caps: PrimaryCapsSpec {
                channels: 2,
                dim: 4,
                kernel: 3,
                stride: 2,
            },
            class_caps: ClassCapsSpec {
                num_classes: 2,
                dim: 4,
            },
            routing_iters: self.routing_iters,
            margin: self.margin,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}
