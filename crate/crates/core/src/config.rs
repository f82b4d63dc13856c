//! Model configuration and the two compiled profiles.

use crate::error::{DcaeError, Result};

/// Rate–distortion trade-offs of the reference training set, indexed by
/// `lambda_index`.
pub const LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0500];

/// `lambda_index` value for a λ outside [`LAMBDAS`].
pub const CUSTOM_LAMBDA_INDEX: u8 = 255;

pub fn lambda_index_of(lambda: f64) -> u8 {
    LAMBDAS
        .iter()
        .position(|&l| (l - lambda).abs() < 1e-12)
        .map_or(CUSTOM_LAMBDA_INDEX, |i| i as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Tiny,
    Paper,
    Custom,
}

impl Profile {
    pub fn id(self) -> u8 {
        match self {
            Profile::Tiny => 0,
            Profile::Paper => 1,
            Profile::Custom => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Profile::Tiny),
            1 => Ok(Profile::Paper),
            2 => Ok(Profile::Custom),
            other => Err(DcaeError::Config(format!("unknown profile id {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Tiny => "tiny",
            Profile::Paper => "paper",
            Profile::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Profile::Tiny),
            "paper" => Ok(Profile::Paper),
            other => Err(DcaeError::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub y_channels: usize,
    pub z_channels: usize,
    /// Output channels of every analysis stage except the last, which
    /// produces `y_channels`. Length is `log2(downsample_factor_y) - 1`.
    pub stage_channels: Vec<usize>,
    pub downsample_factor_y: usize,
    pub downsample_factor_z: usize,
    pub profile_name: String,
}

impl AutoencoderConfig {
    pub fn s_total(&self) -> usize {
        self.downsample_factor_y * self.downsample_factor_z
    }

    pub fn y_stages(&self) -> usize {
        self.downsample_factor_y.trailing_zeros() as usize
    }

    pub fn z_stages(&self) -> usize {
        self.downsample_factor_z.trailing_zeros() as usize
    }

    /// Channel progression of the analysis transform, image to latent.
    pub fn analysis_channels(&self) -> Vec<usize> {
        let mut v = vec![3];
        v.extend(&self.stage_channels);
        v.push(self.y_channels);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceConfig {
    pub slice_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcaBlockConfig {
    /// With DCA off the entropy parameters see only the hyper-prior and the
    /// decoded slices.
    pub enabled: bool,
    pub dict_entries: usize,
    pub dict_channels: usize,
    /// Number of multi-scale feature maps merged by MSFA; 0 bypasses MSFA
    /// with a single linear projection.
    pub msfa_layers: usize,
    pub c_ms: usize,
    pub c_qk: usize,
    pub head_dim: usize,
    pub ffn_expansion: usize,
}

impl DcaBlockConfig {
    pub fn heads(&self) -> usize {
        self.c_qk / self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub profile: Profile,
    pub lambda_index: u8,
    pub autoencoder: AutoencoderConfig,
    pub slices: SliceConfig,
    pub dca: DcaBlockConfig,
    /// Hidden width of the entropy-parameter and residual-prediction heads.
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            profile: Profile::Tiny,
            lambda_index: 3,
            autoencoder: AutoencoderConfig {
                y_channels: 32,
                z_channels: 16,
                stage_channels: vec![16, 24, 32],
                downsample_factor_y: 16,
                downsample_factor_z: 4,
                profile_name: "tiny".into(),
            },
            slices: SliceConfig { slice_count: 4 },
            dca: DcaBlockConfig {
                enabled: true,
                dict_entries: 32,
                dict_channels: 64,
                msfa_layers: 3,
                c_ms: 64,
                c_qk: 64,
                head_dim: 32,
                ffn_expansion: 2,
            },
            head_hidden: 48,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            profile: Profile::Paper,
            lambda_index: 3,
            autoencoder: AutoencoderConfig {
                y_channels: 320,
                z_channels: 192,
                stage_channels: vec![96, 144, 256],
                downsample_factor_y: 16,
                downsample_factor_z: 4,
                profile_name: "paper".into(),
            },
            slices: SliceConfig { slice_count: 5 },
            dca: DcaBlockConfig {
                enabled: true,
                dict_entries: 128,
                dict_channels: 640,
                msfa_layers: 3,
                c_ms: 128,
                c_qk: 128,
                head_dim: 32,
                ffn_expansion: 2,
            },
            head_hidden: 224,
        }
    }

    pub fn for_profile(profile: Profile) -> Result<Self> {
        match profile {
            Profile::Tiny => Ok(Self::tiny()),
            Profile::Paper => Ok(Self::paper()),
            Profile::Custom => Err(DcaeError::Config(
                "the custom profile has no compiled defaults".into(),
            )),
        }
    }

    /// Mark as a custom variant (used for ablations and tests).
    pub fn into_custom(mut self, name: &str) -> Self {
        self.profile = Profile::Custom;
        self.autoencoder.profile_name = name.to_string();
        self
    }

    pub fn slice_channels(&self) -> usize {
        self.autoencoder.y_channels / self.slices.slice_count
    }

    pub fn validate(&self) -> Result<()> {
        let ae = &self.autoencoder;
        let bad = |m: String| Err(DcaeError::Config(m));
        if ae.y_channels == 0 || ae.z_channels == 0 {
            return bad("latent channel counts must be positive".into());
        }
        if !ae.downsample_factor_y.is_power_of_two() || ae.downsample_factor_y < 2 {
            return bad(format!(
                "downsample_factor_y {} must be a power of two >= 2",
                ae.downsample_factor_y
            ));
        }
        if !ae.downsample_factor_z.is_power_of_two() {
            return bad(format!(
                "downsample_factor_z {} must be a power of two",
                ae.downsample_factor_z
            ));
        }
        if ae.stage_channels.len() + 1 != ae.y_stages() {
            return bad(format!(
                "{} stage channel entries given, {} needed for factor {}",
                ae.stage_channels.len(),
                ae.y_stages() - 1,
                ae.downsample_factor_y
            ));
        }
        if ae.stage_channels.contains(&0) {
            return bad("stage channels must be positive".into());
        }
        let s = self.slices.slice_count;
        if !(1..=10).contains(&s) {
            return bad(format!("slice count {s} outside 1..=10"));
        }
        if ae.y_channels % s != 0 {
            return bad(format!(
                "y_channels {} not divisible by slice count {s}",
                ae.y_channels
            ));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be positive".into());
        }
        let d = &self.dca;
        if d.enabled {
            if d.dict_entries == 0 {
                return bad("dictionary needs at least one entry".into());
            }
            if d.dict_channels == 0 || d.c_ms == 0 || d.ffn_expansion == 0 {
                return bad("DCA widths must be positive".into());
            }
            if d.head_dim == 0 || d.c_qk == 0 || d.c_qk % d.head_dim != 0 {
                return bad(format!(
                    "C_qk {} not divisible by head dim {}",
                    d.c_qk, d.head_dim
                ));
            }
            if d.dict_channels % d.heads() != 0 {
                return bad(format!(
                    "C_d {} not divisible by {} heads",
                    d.dict_channels,
                    d.heads()
                ));
            }
        }
        if self.profile != Profile::Custom {
            let compiled = Self::for_profile(self.profile)?;
            let mut probe = self.clone();
            probe.lambda_index = compiled.lambda_index;
            if probe != compiled {
                return bad(format!(
                    "configuration does not match the compiled `{}` profile",
                    self.profile.name()
                ));
            }
        }
        Ok(())
    }
}
