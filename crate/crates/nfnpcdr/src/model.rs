//! Model configuration, id-to-index maps, and parameter registration.
//!
//! All parameter blocks live in one `ParamSet`; registration order is fixed so
//! that a given seed always produces the same initialization (a planar stack
//! with zero steps draws exactly the same values as `FlowFamily::None`).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Interaction};
use crate::error::{Error, Result};
use crate::flows::FlowFamily;
use crate::numkernel::{register_mlp, MlpSpec, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension for users and items.
    pub d1: usize,
    /// Latent dimension of z.
    pub d2: usize,
    /// Common-preference dimension.
    pub d3: usize,
    /// Hidden width of fully connected layers.
    pub hidden: usize,
    /// Depth of the fusion/identity MLPs.
    pub mlp_layers: usize,
    pub flow_family: FlowFamily,
    pub flow_steps: usize,
    /// Centroid count N of the preference pool.
    pub pool_size: usize,
    /// Student's-t degrees of freedom for soft assignments.
    pub student_t_dof: f64,
    /// Modulated decoder layer count.
    pub decoder_layers: usize,
    /// Feed the rating into the encoders as y/5 instead of raw y.
    pub normalize_rating: bool,
    /// Std of embedding and centroid initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d1: 10,
            d2: 64,
            d3: 64,
            hidden: 64,
            mlp_layers: 3,
            flow_family: FlowFamily::Planar,
            flow_steps: 6,
            pool_size: 10,
            student_t_dof: 1.0,
            decoder_layers: 3,
            normalize_rating: false,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d1: 4,
            d2: 8,
            d3: 8,
            hidden: 8,
            mlp_layers: 3,
            flow_family: FlowFamily::Planar,
            flow_steps: 2,
            pool_size: 3,
            student_t_dof: 1.0,
            decoder_layers: 3,
            normalize_rating: false,
            init_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3", self.d3),
            ("hidden", self.hidden),
            ("mlp_layers", self.mlp_layers),
            ("pool_size", self.pool_size),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.student_t_dof <= 0.0 {
            return Err(Error::Config("student_t_dof must be positive".into()));
        }
        if self.flow_family == FlowFamily::Coupling && self.d2 < 2 {
            return Err(Error::Config("coupling flows need d2 >= 2".into()));
        }
        Ok(())
    }

    /// Width of the [u || v || y] encoder input.
    pub fn triple_width(&self) -> usize {
        2 * self.d1 + 1
    }

    /// Width of the [u || v || z_K] decoder input.
    pub fn decoder_input_width(&self) -> usize {
        2 * self.d1 + self.d2
    }

    pub fn phi_spec(&self) -> MlpSpec {
        MlpSpec::with_hidden(self.triple_width(), self.hidden, self.d2, self.mlp_layers)
            .expect("valid phi spec")
    }

    pub fn theta_spec(&self) -> MlpSpec {
        MlpSpec::with_hidden(self.triple_width(), self.hidden, self.d3, self.mlp_layers)
            .expect("valid theta spec")
    }
}

/// String-id to dense-index maps persisted alongside checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items_source: Vec<String>,
    pub items_target: Vec<String>,
    #[serde(skip)]
    user_lookup: HashMap<String, usize>,
    #[serde(skip)]
    item_source_lookup: HashMap<String, usize>,
    #[serde(skip)]
    item_target_lookup: HashMap<String, usize>,
}

fn build_lookup(ids: &[String]) -> HashMap<String, usize> {
    ids.iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect()
}

impl IdMaps {
    /// Dense indices over every user and item surviving preprocessing.
    /// Users are the union of both domains so cold-start users embed too.
    pub fn from_datasets(source: &DomainDataset, target: &DomainDataset) -> Self {
        let mut users: Vec<String> = source
            .user_ids()
            .into_iter()
            .chain(target.user_ids())
            .map(|s| s.to_string())
            .collect();
        users.sort();
        users.dedup();
        let mut items_source: Vec<String> =
            source.item_ids().into_iter().map(|s| s.to_string()).collect();
        items_source.sort();
        let mut items_target: Vec<String> =
            target.item_ids().into_iter().map(|s| s.to_string()).collect();
        items_target.sort();
        let mut maps = IdMaps {
            users,
            items_source,
            items_target,
            ..Default::default()
        };
        maps.rebuild_lookups();
        maps
    }

    pub fn rebuild_lookups(&mut self) {
        self.user_lookup = build_lookup(&self.users);
        self.item_source_lookup = build_lookup(&self.items_source);
        self.item_target_lookup = build_lookup(&self.items_target);
    }

    pub fn user_index(&self, id: &str) -> Result<usize> {
        self.user_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown user id {id}")))
    }

    pub fn item_index(&self, id: &str, source: bool) -> Result<usize> {
        let map = if source {
            &self.item_source_lookup
        } else {
            &self.item_target_lookup
        };
        map.get(id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown item id {id}")))
    }
}

/// Rating as it enters the encoder input triples.
pub fn rating_feature(config: &ModelConfig, i: &Interaction) -> f64 {
    if config.normalize_rating {
        i.rating as f64 / 5.0
    } else {
        i.rating as f64
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub id_maps: IdMaps,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, id_maps: IdMaps, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let std = config.init_std;
        params.register_normal("emb.user", &[id_maps.users.len(), config.d1], std, &mut rng)?;
        params.register_normal(
            "emb.item_src",
            &[id_maps.items_source.len(), config.d1],
            std,
            &mut rng,
        )?;
        params.register_normal(
            "emb.item_tgt",
            &[id_maps.items_target.len(), config.d1],
            std,
            &mut rng,
        )?;
        register_mlp(&mut params, "phi", &config.phi_spec(), 1.0, &mut rng)?;
        let d2 = config.d2;
        register_mlp(&mut params, "gauss.trunk", &MlpSpec::linear(d2, d2)?, 1.0, &mut rng)?;
        register_mlp(&mut params, "gauss.mu", &MlpSpec::linear(d2, d2)?, 1.0, &mut rng)?;
        register_mlp(&mut params, "gauss.sigma", &MlpSpec::linear(d2, d2)?, 1.0, &mut rng)?;
        crate::flows::register_flow(&mut params, &config, &mut rng)?;
        register_mlp(&mut params, "theta", &config.theta_spec(), 1.0, &mut rng)?;
        params.register_normal(
            "pool.centroids",
            &[config.pool_size, config.d3],
            std,
            &mut rng,
        )?;
        for l in 0..config.decoder_layers {
            register_mlp(
                &mut params,
                &format!("film.eta{l}"),
                &MlpSpec::linear(config.d3, config.hidden)?,
                1.0,
                &mut rng,
            )?;
            register_mlp(
                &mut params,
                &format!("film.delta{l}"),
                &MlpSpec::linear(config.d3, config.hidden)?,
                1.0,
                &mut rng,
            )?;
        }
        for l in 0..config.decoder_layers {
            let fan_in = if l == 0 {
                config.decoder_input_width()
            } else {
                config.hidden
            };
            register_mlp(
                &mut params,
                &format!("dec.l{l}"),
                &MlpSpec::linear(fan_in, config.hidden)?,
                1.0,
                &mut rng,
            )?;
        }
        register_mlp(
            &mut params,
            "dec.head",
            &MlpSpec::linear(config.hidden, 1)?,
            1.0,
            &mut rng,
        )?;
        Ok(Model {
            config,
            id_maps,
            params,
        })
    }
}
