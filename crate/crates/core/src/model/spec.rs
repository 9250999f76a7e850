use std::fmt;

use crate::cmp::CmpConfig;
use crate::error::{Error, Result};
use crate::ops::conv_output_dim;

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// 2x2 spatial max pooling, stride 2.
    MaxPool,
    /// Global average pooling.
    Gap,
    /// Channel max pooling with compression factor `r` and channel stride `s`.
    Cmp { compression: f64, stride: usize },
    Dense { units: usize },
    BatchNorm,
    Elu,
    Dropout { p: f64 },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::Gap => "gap",
            LayerSpec::Cmp { .. } => "cmp",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Elu => "elu",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }
}

/// Which member of the baseline / WoGAP / CMP family a spec belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Features are globally average pooled before the classifier.
    BaselineGap,
    /// No pooling between the features and the classifier.
    BaselineWoGap,
    /// One CMP layer between the features and the classifier.
    Cmp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineGap => "baseline",
            Variant::BaselineWoGap => "wogap",
            Variant::Cmp => "cmp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "baseline" | "baseline_gap" | "gap" => Some(Variant::BaselineGap),
            "wogap" | "baseline_wogap" => Some(Variant::BaselineWoGap),
            "cmp" => Some(Variant::Cmp),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Order of the normalisation, dropout and activation stages after FC1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadOrder {
    #[default]
    BnDropoutElu,
    BnEluDropout,
}

/// Classifier head: FC(hidden) -> BN / dropout / ELU -> FC(classes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub order: HeadOrder,
}

impl Head {
    pub fn new(hidden: usize, classes: usize) -> Self {
        Self {
            hidden,
            classes,
            dropout: 0.5,
            order: HeadOrder::default(),
        }
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut out = vec![LayerSpec::Dense { units: self.hidden }, LayerSpec::BatchNorm];
        let drop = LayerSpec::Dropout { p: self.dropout };
        match self.order {
            HeadOrder::BnDropoutElu => out.extend([drop, LayerSpec::Elu]),
            HeadOrder::BnEluDropout => out.extend([LayerSpec::Elu, drop]),
        }
        out.push(LayerSpec::Dense { units: self.classes });
        out
    }
}

/// Pooled feature geometry of the large backbones, used for head-level
/// parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPreset {
    DenseNet161,
    Vgg16,
    ResNet152,
}

impl HeadPreset {
    pub const ALL: [HeadPreset; 3] = [HeadPreset::DenseNet161, HeadPreset::Vgg16, HeadPreset::ResNet152];

    pub fn name(self) -> &'static str {
        match self {
            HeadPreset::DenseNet161 => "densenet161-head",
            HeadPreset::Vgg16 => "vgg16-head",
            HeadPreset::ResNet152 => "resnet152-head",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `(C, M, N)` of the last feature map.
    pub fn features(self) -> [usize; 3] {
        match self {
            HeadPreset::DenseNet161 => [2208, 7, 7],
            HeadPreset::Vgg16 => [512, 7, 7],
            HeadPreset::ResNet152 => [2048, 7, 7],
        }
    }
}

/// A sequential network over `(C, H, W)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub variant: Variant,
}

/// Shape propagation result for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub cmp: Option<CmpConfig>,
}

fn pooling_layers(variant: Variant, cmp: Option<(f64, usize)>) -> Result<Vec<LayerSpec>> {
    Ok(match (variant, cmp) {
        (Variant::BaselineGap, _) => vec![LayerSpec::Gap],
        (Variant::BaselineWoGap, _) => vec![],
        (Variant::Cmp, Some((compression, stride))) => vec![LayerSpec::Cmp { compression, stride }],
        (Variant::Cmp, None) => return Err(Error::arg("cmp variant needs (r, s)")),
    })
}

impl ModelSpec {
    /// Classifier head on top of a preset backbone's pooled features.
    pub fn head(preset: HeadPreset, variant: Variant, cmp: Option<(f64, usize)>, head: Head) -> Result<Self> {
        let mut layers = pooling_layers(variant, cmp)?;
        layers.extend(head.layers());
        Ok(Self {
            input: preset.features(),
            layers,
            num_classes: head.classes,
            variant,
        })
    }

    /// The reference desk-scale network: four conv blocks (3x3 conv, BN,
    /// ELU, with 2x2 max pooling after the first three), the variant's
    /// pooling stage, then the classifier head.
    pub fn toycar(variant: Variant, cmp: Option<(f64, usize)>, image_size: usize, head: Head) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, width) in Self::TOYCAR_WIDTHS.into_iter().enumerate() {
            layers.extend([LayerSpec::conv3x3(width), LayerSpec::BatchNorm, LayerSpec::Elu]);
            if i < 3 {
                layers.push(LayerSpec::MaxPool);
            }
        }
        layers.extend(pooling_layers(variant, cmp)?);
        layers.extend(head.layers());
        Ok(Self {
            input: [3, image_size, image_size],
            layers,
            num_classes: head.classes,
            variant,
        })
    }

    pub const TOYCAR_WIDTHS: [usize; 4] = [16, 32, 64, 64];
    pub const TOYCAR_HIDDEN: usize = 64;

    /// Channel depth the toycar backbone hands to its pooling stage.
    pub fn toycar_feature_channels() -> usize {
        Self::TOYCAR_WIDTHS[3]
    }

    fn build_err(index: usize, layer: &LayerSpec, reason: impl Into<String>) -> Error {
        Error::Build {
            index,
            kind: layer.kind(),
            reason: reason.into(),
        }
    }

    /// Propagates shapes through every layer and checks the variant rules.
    pub fn validate(&self) -> Result<Vec<LayerShape>> {
        if self.input.contains(&0) {
            return Err(Error::arg(format!("input shape {:?} has a zero extent", self.input)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |reason: String| Self::build_err(i, layer, reason);
            let [c, h, w] = cur;
            let mut cmp = None;
            let next = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 {
                        return Err(err("zero output channels".into()));
                    }
                    let oh = conv_output_dim(h, kernel, stride, pad).map_err(|e| err(e.to_string()))?;
                    let ow = conv_output_dim(w, kernel, stride, pad).map_err(|e| err(e.to_string()))?;
                    [out_channels, oh, ow]
                }
                LayerSpec::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(err(format!("spatial extent {h}x{w} too small for 2x2 pooling")));
                    }
                    [c, h / 2, w / 2]
                }
                LayerSpec::Gap => [c, 1, 1],
                LayerSpec::Cmp { compression, stride } => {
                    let cfg = CmpConfig::new(c, compression, stride).map_err(|e| err(e.to_string()))?;
                    cmp = Some(cfg);
                    [cfg.out_channels(), h, w]
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(err("zero units".into()));
                    }
                    [units, 1, 1]
                }
                LayerSpec::BatchNorm | LayerSpec::Elu => cur,
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(err(format!("dropout probability {p} outside [0, 1)")));
                    }
                    cur
                }
            };
            shapes.push(LayerShape {
                input: cur,
                output: next,
                cmp,
            });
            cur = next;
        }

        match self.layers.last() {
            Some(LayerSpec::Dense { units }) if *units == self.num_classes => {}
            _ => {
                return Err(Error::Build {
                    index: self.layers.len().saturating_sub(1),
                    kind: self.layers.last().map_or("none", LayerSpec::kind),
                    reason: format!("last layer must be dense with {} units", self.num_classes),
                })
            }
        }
        if self.num_classes < 2 {
            return Err(Error::arg("need at least two classes"));
        }
        self.check_variant()?;
        Ok(shapes)
    }

    fn check_variant(&self) -> Result<()> {
        let positions = |kind: &str| -> Vec<usize> {
            self.layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.kind() == kind)
                .map(|(i, _)| i)
                .collect()
        };
        let cmps = positions("cmp");
        let gaps = positions("gap");
        let first_dense = positions("dense")[0];
        let last_feature = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool));
        let bad = |index: usize, reason: &str| Error::Build {
            index,
            kind: self.layers[index].kind(),
            reason: format!("{} variant: {reason}", self.variant),
        };
        match self.variant {
            Variant::Cmp => {
                if cmps.len() != 1 {
                    return Err(bad(cmps.get(1).copied().unwrap_or(first_dense), "needs exactly one cmp layer"));
                }
                let at = cmps[0];
                if at > first_dense || last_feature.is_some_and(|f| f > at) {
                    return Err(bad(at, "cmp must sit between the last feature layer and the first dense layer"));
                }
                if let Some(&g) = gaps.first() {
                    return Err(bad(g, "cmp variant keeps spatial maps, no gap allowed"));
                }
            }
            Variant::BaselineGap => {
                if let Some(&c) = cmps.first() {
                    return Err(bad(c, "baselines have no cmp layer"));
                }
                if !gaps.iter().any(|&g| g < first_dense) {
                    return Err(bad(first_dense, "needs a gap layer before the first dense layer"));
                }
            }
            Variant::BaselineWoGap => {
                if let Some(&c) = cmps.first() {
                    return Err(bad(c, "baselines have no cmp layer"));
                }
                if let Some(&g) = gaps.first() {
                    return Err(bad(g, "wogap variant has no gap layer"));
                }
            }
        }
        Ok(())
    }

    /// The CMP configuration of the spec's channel pooling layer, if any.
    pub fn cmp_config(&self) -> Result<Option<CmpConfig>> {
        Ok(self.validate()?.iter().find_map(|s| s.cmp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant, cmp: Option<(f64, usize)>) -> ModelSpec {
        ModelSpec::toycar(variant, cmp, 32, Head::new(64, 8)).unwrap()
    }

    #[test]
    fn toycar_shapes() {
        let shapes = toy(Variant::Cmp, Some((4.0, 4))).validate().unwrap();
        let cmp = shapes.iter().find(|s| s.cmp.is_some()).unwrap();
        assert_eq!(cmp.input, [64, 4, 4]);
        assert_eq!(cmp.output, [16, 4, 4]);
        assert_eq!(shapes.last().unwrap().output, [8, 1, 1]);
    }

    #[test]
    fn small_example_network_validates() {
        let spec = ModelSpec {
            input: [3, 32, 32],
            layers: vec![
                LayerSpec::conv3x3(16),
                LayerSpec::Elu,
                LayerSpec::MaxPool,
                LayerSpec::conv3x3(64),
                LayerSpec::Elu,
                LayerSpec::MaxPool,
                LayerSpec::Cmp { compression: 4.0, stride: 4 },
                LayerSpec::Dense { units: 64 },
                LayerSpec::BatchNorm,
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Elu,
                LayerSpec::Dense { units: 8 },
            ],
            num_classes: 8,
            variant: Variant::Cmp,
        };
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[6].output, [16, 8, 8]);
        assert_eq!(shapes[7].output, [64, 1, 1]);
    }

    #[test]
    fn bad_cmp_config_names_layer() {
        let spec = toy(Variant::Cmp, Some((2.0, 33)));
        match spec.validate() {
            Err(Error::Build { index, kind, reason }) => {
                assert_eq!(kind, "cmp");
                assert_eq!(index, 15);
                assert!(reason.contains("k=-959"), "{reason}");
            }
            other => panic!("expected build error, got {other:?}"),
        }
    }

    #[test]
    fn variant_rules() {
        let mut spec = toy(Variant::Cmp, Some((4.0, 4)));
        spec.variant = Variant::BaselineWoGap;
        assert!(spec.validate().is_err());

        let mut spec = toy(Variant::BaselineWoGap, None);
        spec.variant = Variant::BaselineGap;
        assert!(spec.validate().is_err());

        let mut spec = toy(Variant::Cmp, Some((4.0, 4)));
        spec.layers.insert(spec.layers.len() - 1, LayerSpec::Cmp { compression: 2.0, stride: 2 });
        assert!(spec.validate().is_err());

        assert!(ModelSpec::toycar(Variant::Cmp, None, 32, Head::new(8, 8)).is_err());
    }

    #[test]
    fn last_layer_must_emit_classes() {
        let mut spec = toy(Variant::BaselineGap, None);
        spec.num_classes = 9;
        assert!(matches!(spec.validate(), Err(Error::Build { .. })));
    }

    #[test]
    fn tiny_input_fails_at_pooling() {
        let spec = ModelSpec::toycar(Variant::BaselineGap, None, 4, Head::new(8, 8)).unwrap();
        match spec.validate() {
            Err(Error::Build { kind, .. }) => assert_eq!(kind, "maxpool"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn names_round_trip() {
        for v in [Variant::BaselineGap, Variant::BaselineWoGap, Variant::Cmp] {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
        for p in HeadPreset::ALL {
            assert_eq!(HeadPreset::from_name(p.name()), Some(p));
        }
    }
}
