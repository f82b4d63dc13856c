use crate::config::ModelConfig;
use crate::entropy::init_entropy;
use crate::error::Result;
use crate::params::{Initializer, ParamStore};
use crate::tensor::Tensor;
use crate::transforms::init_transforms;

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DcaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DcaeModel {
    /// Fresh weights drawn from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        init_transforms(&config.autoencoder, &mut init, &mut params)?;
        init_entropy(&config, &mut init, &mut params)?;
        Ok(DcaeModel { config, params })
    }

    pub fn tiny(seed: u64) -> Result<Self> {
        Self::new(ModelConfig::tiny(), seed)
    }

    pub fn dictionary(&self) -> Option<&Tensor> {
        self.params.value("dictionary").ok()
    }

    pub fn lambda(&self) -> Option<f64> {
        crate::config::LAMBDAS
            .get(self.config.lambda_index as usize)
            .copied()
    }
}
