//! Parameter and operation counting.
//!
//! Multiply-accumulates cover convolutions, per-position linear maps and the
//! selective scan (state update and output contraction per direction).
//! Normalization, activations, pooling, upsampling, gating and residual
//! additions are counted as elementwise operations at one op each. FLOPs in
//! the MAC convention are `macs + elementwise`; in the 2·MAC convention
//! `2 * macs + elementwise`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModuleCost};
use crate::param::Module;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    #[default]
    #[serde(rename = "MAC")]
    Mac,
    #[serde(rename = "2MAC")]
    TwoMac,
}

impl Convention {
    pub fn flops(self, macs: u64, elementwise: u64) -> u64 {
        match self {
            Convention::Mac => macs + elementwise,
            Convention::TwoMac => 2 * macs + elementwise,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Convention::Mac => "MAC",
            Convention::TwoMac => "2MAC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub input_shape: [usize; 4],
    pub total_params: usize,
    pub total_macs: u64,
    pub total_elementwise: u64,
    pub convention: Convention,
    /// FLOPs in the declared convention.
    pub total_flops: u64,
    pub flops_mac: u64,
    pub flops_2mac: u64,
    pub breakdown: Vec<ModuleCost>,
}

/// Exact number of learnable scalars in the registry.
pub fn count_params<M: Module + ?Sized>(model: &M) -> usize {
    model.num_params()
}

/// Operation counts for one forward pass at `input_shape = (B, C, H, W)`.
pub fn count_flops(model: &Model, input_shape: [usize; 4], convention: Convention) -> Result<ComplexityReport> {
    let [b, c, h, w] = input_shape;
    if c != model.config.in_channels {
        return Err(Error::Input(format!(
            "input has {c} channels, model expects {}",
            model.config.in_channels
        )));
    }
    if b == 0 || h == 0 || w == 0 || h % crate::network::DOWNSAMPLE != 0 || w % crate::network::DOWNSAMPLE != 0 {
        return Err(Error::Input(format!(
            "input shape {input_shape:?} needs a non-empty batch and spatial dims divisible by {}",
            crate::network::DOWNSAMPLE
        )));
    }
    let breakdown = model.cost_breakdown(b, h, w);
    let total_macs = breakdown.iter().map(|m| m.macs).sum();
    let total_elementwise = breakdown.iter().map(|m| m.elementwise).sum();
    let total_params = breakdown.iter().map(|m| m.params).sum();
    debug_assert_eq!(total_params, count_params(model));
    Ok(ComplexityReport {
        input_shape,
        total_params,
        total_macs,
        total_elementwise,
        convention,
        total_flops: convention.flops(total_macs, total_elementwise),
        flops_mac: Convention::Mac.flops(total_macs, total_elementwise),
        flops_2mac: Convention::TwoMac.flops(total_macs, total_elementwise),
        breakdown,
    })
}

impl ComplexityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table, one row per module plus a total.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input {:?}, convention {}", self.input_shape, self.convention.label());
        let _ = writeln!(s, "{:<12} {:>9} {:>14} {:>14}", "module", "params", "MACs", "elementwise");
        for m in &self.breakdown {
            let _ = writeln!(s, "{:<12} {:>9} {:>14} {:>14}", m.name, m.params, m.macs, m.elementwise);
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>14} {:>14}",
            "total", self.total_params, self.total_macs, self.total_elementwise
        );
        let _ = writeln!(
            s,
            "GFLOPs: {:.4} (MAC) / {:.4} (2MAC)",
            self.flops_mac as f64 / 1e9,
            self.flops_2mac as f64 / 1e9
        );
        s
    }
}
