use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::PartialRatio;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Version {
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    N,
    S,
    M,
    L,
}

/// Stage-body style.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// RepBlocks of plain RepConvs.
    PureRep,
    /// BepC3 blocks of Bep units.
    #[serde(rename = "bepc3")]
    BepC3,
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Version::V1 => "v1",
            Version::V2 => "v2",
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::N => "n",
            Variant::S => "s",
            Variant::M => "m",
            Variant::L => "l",
        })
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::PureRep => "pure_rep",
            Structure::BepC3 => "bepc3",
        })
    }
}

/// Depth and width multipliers of every published variant.
pub const SCALING_TABLE: [(Version, Variant, f64, f64); 6] = [
    (Version::V1, Variant::N, 0.33, 0.25),
    (Version::V1, Variant::S, 0.33, 0.50),
    (Version::V2, Variant::N, 0.33, 0.25),
    (Version::V2, Variant::S, 0.33, 0.50),
    (Version::V2, Variant::M, 0.60, 0.75),
    (Version::V2, Variant::L, 1.0, 1.0),
];

pub const BACKBONE_DEPTHS: [usize; 5] = [1, 6, 12, 18, 6];
pub const BACKBONE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
pub const NECK_DEPTHS: [usize; 4] = [12, 12, 12, 12];
/// Neck widths in slot order: lateral P5, lateral P4, output P3,
/// downsample, output P4, output P5.
pub const NECK_WIDTHS: [usize; 6] = [256, 128, 128, 256, 256, 512];

fn table_row(version: Version, variant: Variant) -> Option<(f64, f64)> {
    SCALING_TABLE
        .iter()
        .find(|(v, var, _, _)| *v == version && *var == variant)
        .map(|&(_, _, d, w)| (d, w))
}

/// A validated model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub version: Version,
    pub variant: Variant,
    pub depth_multiplier: f64,
    pub width_multiplier: f64,
    pub structure: Structure,
    /// Present exactly when `structure` is BepC3.
    pub partial_ratio: Option<PartialRatio>,
    pub input_channels: usize,
}

/// On-disk form of [`ModelSpec`]; everything but version and variant is
/// optional and filled from the scaling table and defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub version: Option<Version>,
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<Structure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_ratio: Option<PartialRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
}

impl ModelSpec {
    /// The table row for `version`/`variant` with default structure.
    pub fn named(version: Version, variant: Variant) -> Result<Self> {
        SpecDocument {
            version: Some(version),
            variant: Some(variant),
            ..Default::default()
        }
        .resolve()
    }

    /// Every buildable row of the scaling table.
    pub fn all_named() -> Vec<ModelSpec> {
        SCALING_TABLE
            .iter()
            .map(|&(v, var, _, _)| ModelSpec::named(v, var).expect("table rows are valid"))
            .collect()
    }

    /// Same variant with a different stage-body style.
    pub fn with_structure(&self, structure: Structure) -> Result<Self> {
        SpecDocument {
            structure: Some(structure),
            partial_ratio: None,
            ..self.to_document()
        }
        .resolve()
    }

    pub fn name(&self) -> String {
        format!("yolov6{}-{}", self.variant, self.version)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpecDocument =
            serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        doc.resolve()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_document(&self) -> SpecDocument {
        SpecDocument {
            version: Some(self.version),
            variant: Some(self.variant),
            depth_multiplier: Some(self.depth_multiplier),
            width_multiplier: Some(self.width_multiplier),
            structure: Some(self.structure),
            partial_ratio: self.partial_ratio,
            input_channels: Some(self.input_channels),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("spec serializes")
    }
}

impl SpecDocument {
    pub fn resolve(self) -> Result<ModelSpec> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        let Some(version) = self.version else {
            return bad("missing field `version`".into());
        };
        let Some(variant) = self.variant else {
            return bad("missing field `variant`".into());
        };
        let Some((depth, width)) = table_row(version, variant) else {
            return bad(format!(
                "yolov6{variant}-{version} is not in the scaling table (v1 has n and s; v2 has n, s, m and l)"
            ));
        };
        for (field, given, expected) in [
            ("depth_multiplier", self.depth_multiplier, depth),
            ("width_multiplier", self.width_multiplier, width),
        ] {
            if let Some(m) = given {
                if m != expected {
                    return bad(format!(
                        "{field} for yolov6{variant}-{version} must be {expected}, got {m}"
                    ));
                }
            }
        }
        let input_channels = self.input_channels.unwrap_or(3);
        if input_channels == 0 {
            return bad("input_channels must be positive".into());
        }

        let default_structure = match (version, variant) {
            (Version::V2, Variant::M | Variant::L) => Structure::BepC3,
            _ => Structure::PureRep,
        };
        let structure = self.structure.unwrap_or(default_structure);
        if version == Version::V1 && structure == Structure::BepC3 {
            return bad("v1 models are pure rep-style; bepc3 requires version v2".into());
        }
        let partial_ratio = match (structure, self.partial_ratio) {
            (Structure::PureRep, Some(r)) => {
                return bad(format!("partial_ratio {r} given for a pure rep-style model"))
            }
            (Structure::PureRep, None) => None,
            (Structure::BepC3, Some(r)) => Some(r),
            (Structure::BepC3, None) => Some(match variant {
                Variant::M => PartialRatio::TWO_THIRDS,
                _ => PartialRatio::HALF,
            }),
        };

        Ok(ModelSpec {
            version,
            variant,
            depth_multiplier: depth,
            width_multiplier: width,
            structure,
            partial_ratio,
            input_channels,
        })
    }
}
