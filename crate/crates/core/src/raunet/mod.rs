//! Resolution-aware U-Net.
//!
//! A single [`ParameterStore`] backs three execution plans. The vanilla plan
//! uses the stock samplers everywhere; the RAU-Net plan swaps the sampler pair
//! of one level for a resolution-aware downsampler (RAD) and upsampler (RAU)
//! so the deep levels see the extent they were built for; the progressive plan
//! does the same at two consecutive levels with factor 4 each.
//! [`select_variant`] picks the plan per denoising step.

mod blocks;
mod config;
mod params;
mod plan;
mod samplers;

pub use blocks::timestep_embedding;
pub use config::{select_variant, LevelConfig, PlanVariant, RadVariant, SwitchConfig, UNetConfig};
pub use params::{parameter_keys, parameter_specs, synthesize, Init, ParamSpec};
pub use plan::{build_plan, level_extents, sampler_layout, Downsampler, UNetPlan, Upsampler};
pub use samplers::{rad, rad_spec, rau, vanilla_down, vanilla_up};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::weights::ParameterStore;

/// The plans a sampling run may switch between, all over one store.
#[derive(Debug, Clone)]
pub struct PlanSet {
    plans: BTreeMap<PlanVariant, UNetPlan>,
}

impl PlanSet {
    pub fn build(
        cfg: Arc<UNetConfig>,
        store: Arc<ParameterStore>,
        input: (usize, usize),
        variants: impl IntoIterator<Item = PlanVariant>,
    ) -> Result<Self> {
        let mut plans = BTreeMap::new();
        for v in variants {
            if let std::collections::btree_map::Entry::Vacant(e) = plans.entry(v) {
                e.insert(build_plan(cfg.clone(), v, store.clone(), input)?);
            }
        }
        Ok(Self { plans })
    }

    pub fn get(&self, variant: PlanVariant) -> Result<&UNetPlan> {
        self.plans
            .get(&variant)
            .ok_or_else(|| Error::Plan(format!("plan {variant} was not built")))
    }

    pub fn variants(&self) -> impl Iterator<Item = PlanVariant> + '_ {
        self.plans.keys().copied()
    }
}
