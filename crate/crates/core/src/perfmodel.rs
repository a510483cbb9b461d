//! Analytic throughput and energy estimates for digital, analog and
//! heterogeneous execution.
//!
//! Digital time is `max(ops / (mfu * peak_ops), bytes / bandwidth)`. Analog
//! time and energy are sums of per-operation table entries. A heterogeneous
//! run takes the larger of the two latencies and charges the digital power
//! for that latency plus the analog energy.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Analog operation kind for one matrix-vector product on a full tile.
pub const TILE_MVM: &str = "tile_mvm";
/// Analog operation kind for the non-MVM work (attention, normalization) of
/// the dense modules for one token, charged when those modules run analog.
pub const DENSE_TOKEN: &str = "dense_token";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DigitalDevice {
    /// Operations per second.
    pub peak_ops: f64,
    pub power_watts: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Model FLOPs utilization in `(0, 1]`.
    pub mfu: f64,
}

impl Default for DigitalDevice {
    /// An A100-class accelerator: 624 TOP/s at 400 W with 1555 GB/s.
    fn default() -> Self {
        Self {
            peak_ops: 624e12,
            power_watts: 400.0,
            bandwidth: 1555e9,
            mfu: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalogDevice {
    /// Seconds per operation, by kind.
    pub latency: BTreeMap<String, f64>,
    /// Joules per operation, by kind.
    pub energy: BTreeMap<String, f64>,
}

impl Default for AnalogDevice {
    /// Placeholder constants, not measurements. `tile_mvm` is the effective
    /// serialized cost of one 512 x 512 tile MVM with many tiles working
    /// concurrently; `dense_token` covers the dense modules' non-MVM work.
    /// Both were picked so the OLMoE batch-32 all-analog and dense-digital
    /// rows land near published figures. Override them in the config.
    fn default() -> Self {
        Self {
            latency: BTreeMap::from([(TILE_MVM.to_string(), 5.7e-9), (DENSE_TOKEN.to_string(), 1.27e-3)]),
            energy: BTreeMap::from([(TILE_MVM.to_string(), 8e-9), (DENSE_TOKEN.to_string(), 2e-6)]),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceProfile {
    pub digital: DigitalDevice,
    pub analog: AnalogDevice,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let d = &self.digital;
        for (name, v) in [
            ("peak_ops", d.peak_ops),
            ("power_watts", d.power_watts),
            ("bandwidth", d.bandwidth),
            ("mfu", d.mfu),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("digital {name} must be positive, got {v}")));
            }
        }
        if d.mfu > 1.0 {
            return Err(Error::Config(format!("mfu must be at most 1, got {}", d.mfu)));
        }
        for (table, entries) in [("latency", &self.analog.latency), ("energy", &self.analog.energy)] {
            for (kind, &v) in entries {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("analog {table} of {kind} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Work of one forward batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Tokens produced by the batch.
    pub tokens: f64,
    /// Digital operations.
    pub digital_ops: f64,
    /// Weight bytes moved to the digital accelerator.
    pub digital_bytes: f64,
    /// Analog operation counts by kind.
    pub analog_ops: BTreeMap<String, f64>,
    pub batch_size: usize,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.tokens, self.digital_ops, self.digital_bytes]
            .into_iter()
            .chain(self.analog_ops.values().copied());
        if counts.into_iter().any(|v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("workload counts must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn has_analog(&self) -> bool {
        self.analog_ops.values().any(|&v| v > 0.0)
    }

    pub fn has_digital(&self) -> bool {
        self.digital_ops > 0.0 || self.digital_bytes > 0.0
    }
}

/// Digital latency of a batch: the slower of compute and weight transfer.
pub fn digital_latency(w: &WorkloadSpec, p: &DeviceProfile) -> Result<f64> {
    w.validate()?;
    let d = &p.digital;
    let compute = w.digital_ops / (d.mfu * d.peak_ops);
    let transfer = w.digital_bytes / d.bandwidth;
    if !(d.mfu * d.peak_ops > 0.0) || !(d.bandwidth > 0.0) {
        return Err(Error::param("digital device has a zero rate"));
    }
    Ok(compute.max(transfer))
}

/// Tokens per second on the digital accelerator.
pub fn digital_throughput(w: &WorkloadSpec, p: &DeviceProfile) -> Result<f64> {
    let latency = digital_latency(w, p)?;
    if latency == 0.0 {
        return Err(Error::param("digital workload has neither operations nor transfers"));
    }
    Ok(w.tokens / latency)
}

/// Tokens per joule (tokens per watt-second).
pub fn digital_energy_eff(throughput: f64, p: &DeviceProfile) -> Result<f64> {
    if !(throughput >= 0.0) {
        return Err(Error::param(format!("throughput must be nonnegative, got {throughput}")));
    }
    Ok(throughput / p.digital.power_watts)
}

/// Summed analog latency and energy of a batch.
pub fn analog_cost(w: &WorkloadSpec, p: &DeviceProfile) -> Result<(f64, f64)> {
    w.validate()?;
    let mut latency = 0.0;
    let mut energy = 0.0;
    for (kind, &count) in &w.analog_ops {
        let lookup = |table: &BTreeMap<String, f64>, name: &str| {
            table
                .get(kind)
                .copied()
                .ok_or_else(|| Error::Config(format!("analog {name} table has no entry for {kind:?}")))
        };
        latency += count * lookup(&p.analog.latency, "latency")?;
        energy += count * lookup(&p.analog.energy, "energy")?;
    }
    Ok((latency, energy))
}

/// `(tokens/s, tokens/J)` of a purely analog execution.
pub fn analog_estimates(w: &WorkloadSpec, p: &DeviceProfile) -> Result<(f64, f64)> {
    if !w.has_analog() {
        return Err(Error::param("analog estimates are undefined for an empty analog workload"));
    }
    let (latency, energy) = analog_cost(w, p)?;
    Ok((w.tokens / latency, w.tokens / energy))
}

/// `(tokens/s, tokens/J)` with both accelerators working concurrently.
///
/// Efficiency is evaluated as `throughput / (power + E_analog / latency)`,
/// which equals `tokens / (power * latency + E_analog)` and reduces to
/// `throughput / power` bit for bit when the analog side is empty.
pub fn heterogeneous_estimates(w: &WorkloadSpec, p: &DeviceProfile) -> Result<(f64, f64)> {
    let digital = digital_latency(w, p)?;
    let (analog, analog_energy) = analog_cost(w, p)?;
    let latency = digital.max(analog);
    if latency == 0.0 {
        return Err(Error::param("heterogeneous workload is empty"));
    }
    let throughput = w.tokens / latency;
    let efficiency = throughput / (p.digital.power_watts + analog_energy / latency);
    Ok((throughput, efficiency))
}

/// Parameter layout of an MoE language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    pub total_params: f64,
    /// Parameters used per token.
    pub active_params: f64,
    /// Fraction of parameters outside the sparse experts (attention,
    /// embeddings, head, shared experts).
    pub dense_fraction: f64,
    pub experts_per_block: usize,
    pub active_experts: usize,
    pub tile_size: usize,
}

impl ModelProfile {
    /// OLMoE: 6.9B total and 1.3B active parameters, 64 experts with 8
    /// active, 5.37% dense parameters.
    pub fn olmoe() -> Self {
        Self {
            name: "olmoe".into(),
            total_params: 6.9e9,
            active_params: 1.3e9,
            dense_fraction: 0.0537,
            experts_per_block: 64,
            active_experts: 8,
            tile_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_params > 0.0) || !(self.active_params > 0.0) || self.active_params > self.total_params {
            return Err(Error::Config("need 0 < active_params <= total_params".into()));
        }
        if !(0.0..=1.0).contains(&self.dense_fraction) {
            return Err(Error::Config("dense_fraction must be in [0, 1]".into()));
        }
        if self.experts_per_block == 0 || self.active_experts == 0 || self.active_experts > self.experts_per_block {
            return Err(Error::Config("need 0 < active_experts <= experts_per_block".into()));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        Ok(())
    }

    pub fn dense_params(&self) -> f64 {
        self.dense_fraction * self.total_params
    }

    pub fn expert_params(&self) -> f64 {
        self.total_params - self.dense_params()
    }

    /// Expert parameters touched per token.
    pub fn active_expert_params(&self) -> f64 {
        (self.active_params - self.dense_params()).max(0.0)
    }
}

/// Where the modules run and how weight traffic is counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Placement {
    /// Dense modules on the digital accelerator.
    pub dense_digital: bool,
    /// Fraction of experts on the digital accelerator.
    pub gamma: f64,
    /// Count only the weights used by the batch as transferred, rather than
    /// every weight resident on the digital side.
    pub active_only_transfer: bool,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            dense_digital: true,
            gamma: 0.0,
            active_only_transfer: false,
        }
    }
}

impl Placement {
    pub fn all_digital() -> Self {
        Self {
            dense_digital: true,
            gamma: 1.0,
            active_only_transfer: false,
        }
    }

    pub fn all_analog() -> Self {
        Self {
            dense_digital: false,
            gamma: 0.0,
            active_only_transfer: false,
        }
    }
}

/// Workload of one batch of `batch_size` tokens.
///
/// Digital work is `2 * (active digital parameters) * tokens` operations and
/// `2 bytes * (digital parameters)` of weight transfer (16-bit weights).
/// Analog work is one tile MVM per token per `tile_size^2` active analog
/// parameters, plus one `dense_token` operation per token when the dense
/// modules run analog. Experts are assumed to be activated uniformly, so a digital
/// expert fraction `gamma` also carries that fraction of the active expert
/// work.
pub fn derive_workload(model: &ModelProfile, placement: &Placement, batch_size: usize) -> Result<WorkloadSpec> {
    model.validate()?;
    if !(0.0..=1.0).contains(&placement.gamma) {
        return Err(Error::Config(format!("gamma must be in [0, 1], got {}", placement.gamma)));
    }
    let tokens = batch_size as f64;
    let dense = model.dense_params();
    let dense_active = dense.min(model.active_params);
    let g = placement.gamma;
    let (mut resident, mut active_digital, mut active_analog) = (
        g * model.expert_params(),
        g * model.active_expert_params(),
        (1.0 - g) * model.active_expert_params(),
    );
    if placement.dense_digital {
        resident += dense;
        active_digital += dense_active;
    } else {
        active_analog += dense_active;
    }
    let transferred = if placement.active_only_transfer {
        active_digital
    } else {
        resident
    };
    let tile = (model.tile_size * model.tile_size) as f64;
    let mut analog_ops = BTreeMap::new();
    if active_analog > 0.0 {
        analog_ops.insert(TILE_MVM.to_string(), tokens * active_analog / tile);
    }
    if !placement.dense_digital {
        analog_ops.insert(DENSE_TOKEN.to_string(), tokens);
    }
    Ok(WorkloadSpec {
        tokens,
        digital_ops: 2.0 * active_digital * tokens,
        digital_bytes: 2.0 * transferred,
        analog_ops,
        batch_size,
    })
}

/// One row of the throughput table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRow {
    pub label: String,
    pub modules_in_digital: String,
    /// Percent of parameters resident on the digital side.
    pub params_in_digital_pct: f64,
    pub throughput: f64,
    pub energy_efficiency: f64,
}

/// Full digital, full analog, and dense-plus-experts heterogeneous rows.
pub fn perf_table(
    model: &ModelProfile,
    device: &DeviceProfile,
    batch_size: usize,
    expert_gammas: &[f64],
    active_only_transfer: bool,
) -> Result<Vec<PerfRow>> {
    device.validate()?;
    let mut rows = Vec::new();
    let w = derive_workload(model, &Placement::all_digital(), batch_size)?;
    let t = digital_throughput(&w, device)?;
    rows.push(PerfRow {
        label: "100% (FP-16)".into(),
        modules_in_digital: "all".into(),
        params_in_digital_pct: 100.0,
        throughput: t,
        energy_efficiency: digital_energy_eff(t, device)?,
    });
    let w = derive_workload(model, &Placement::all_analog(), batch_size)?;
    let (t, e) = analog_estimates(&w, device)?;
    rows.push(PerfRow {
        label: "0% (analog)".into(),
        modules_in_digital: "none".into(),
        params_in_digital_pct: 0.0,
        throughput: t,
        energy_efficiency: e,
    });
    for &gamma in expert_gammas {
        let placement = Placement {
            dense_digital: true,
            gamma,
            active_only_transfer,
        };
        let w = derive_workload(model, &placement, batch_size)?;
        let (t, e) = heterogeneous_estimates(&w, device)?;
        let pct = 100.0 * (model.dense_fraction + gamma * (1.0 - model.dense_fraction));
        rows.push(PerfRow {
            label: format!("{pct:.2}% (het.gen)"),
            modules_in_digital: if gamma == 0.0 {
                "dense".into()
            } else {
                format!("dense + {:.1}% experts", 100.0 * gamma)
            },
            params_in_digital_pct: pct,
            throughput: t,
            energy_efficiency: e,
        });
    }
    Ok(rows)
}

pub fn write_perf_csv<W: Write>(out: &mut W, rows: &[PerfRow]) -> Result<()> {
    writeln!(
        out,
        "param_in_digital,modules_in_digital,params_in_digital_pct,throughput_tokens_per_s,energy_efficiency_tokens_per_watt_s"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.4},{:.6},{:.6}",
            r.label, r.modules_in_digital, r.params_in_digital_pct, r.throughput, r.energy_efficiency
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workload(tokens: f64, ops: f64, bytes: f64, analog: f64) -> WorkloadSpec {
        WorkloadSpec {
            tokens,
            digital_ops: ops,
            digital_bytes: bytes,
            analog_ops: if analog > 0.0 {
                BTreeMap::from([(TILE_MVM.to_string(), analog)])
            } else {
                BTreeMap::new()
            },
            batch_size: 1,
        }
    }

    #[test]
    fn one_token_per_second() {
        let p = DeviceProfile::default();
        assert_eq!(digital_throughput(&workload(1.0, 624e12, 1.0, 0.0), &p).unwrap(), 1.0);
    }

    #[test]
    fn balanced_branches() {
        let p = DeviceProfile::default();
        // 624e12 ops and 1555e9 bytes both take one second.
        let t = digital_throughput(&workload(10.0, 624e12, 1555e9, 0.0), &p).unwrap();
        assert_eq!(t, 10.0);
    }

    #[test]
    fn empty_digital_rejected() {
        let p = DeviceProfile::default();
        assert!(matches!(digital_throughput(&workload(1.0, 0.0, 0.0, 0.0), &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn energy_efficiency_examples() {
        let p = DeviceProfile::default();
        assert_eq!(digital_energy_eff(0.0, &p).unwrap(), 0.0);
        assert_eq!(digital_energy_eff(800.0, &p).unwrap(), 2.0);
        let e = digital_energy_eff(4220.07, &p).unwrap();
        assert_eq!((e * 100.0).round() / 100.0, 10.55);
    }

    #[test]
    fn analog_hand_value() {
        let p = DeviceProfile {
            analog: AnalogDevice {
                latency: BTreeMap::from([("op".to_string(), 1e-3)]),
                energy: BTreeMap::from([("op".to_string(), 0.5)]),
            },
            ..DeviceProfile::default()
        };
        let w = WorkloadSpec {
            tokens: 100.0,
            analog_ops: BTreeMap::from([("op".to_string(), 10.0)]),
            ..WorkloadSpec::default()
        };
        let (t, e) = analog_estimates(&w, &p).unwrap();
        assert!((t - 1e4).abs() < 1e-9);
        assert_eq!(e, 20.0);
    }

    #[test]
    fn analog_missing_entry_and_empty() {
        let p = DeviceProfile::default();
        let w = WorkloadSpec {
            tokens: 1.0,
            analog_ops: BTreeMap::from([("adc".to_string(), 1.0)]),
            ..WorkloadSpec::default()
        };
        assert!(matches!(analog_estimates(&w, &p), Err(Error::Config(_))));
        assert!(matches!(analog_estimates(&workload(1.0, 0.0, 0.0, 0.0), &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn analog_throughput_ignores_batch() {
        let p = DeviceProfile::default();
        let model = ModelProfile::olmoe();
        let small = derive_workload(&model, &Placement::all_analog(), 8).unwrap();
        let large = derive_workload(&model, &Placement::all_analog(), 64).unwrap();
        let (a, _) = analog_estimates(&small, &p).unwrap();
        let (b, _) = analog_estimates(&large, &p).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn heterogeneous_without_analog_is_digital() {
        let p = DeviceProfile::default();
        let w = workload(32.0, 3.3e12, 7.7e9, 0.0);
        let t = digital_throughput(&w, &p).unwrap();
        assert_eq!(heterogeneous_estimates(&w, &p).unwrap(), (t, digital_energy_eff(t, &p).unwrap()));
    }

    #[test]
    fn digital_dominated_heterogeneous() {
        let p = DeviceProfile::default();
        let w = workload(32.0, 624e12, 0.0, 1.0);
        let (t, _) = heterogeneous_estimates(&w, &p).unwrap();
        assert_eq!(t, digital_throughput(&w, &p).unwrap());
    }

    #[test]
    fn olmoe_batch_32_near_table() {
        let p = DeviceProfile::default();
        let w = derive_workload(&ModelProfile::olmoe(), &Placement::all_digital(), 32).unwrap();
        let t = digital_throughput(&w, &p).unwrap();
        assert!((t / 4220.07 - 1.0).abs() <= 0.2, "{t}");
    }

    #[test]
    fn gamma_monotonicity() {
        let p = DeviceProfile::default();
        let model = ModelProfile::olmoe();
        for active_only_transfer in [false, true] {
            let mut last: Option<(f64, f64)> = None;
            for i in 0..=16 {
                let placement = Placement {
                    dense_digital: true,
                    gamma: i as f64 / 16.0,
                    active_only_transfer,
                };
                let w = derive_workload(&model, &placement, 32).unwrap();
                let d = digital_latency(&w, &p).unwrap();
                let a = analog_cost(&w, &p).unwrap().0;
                if let Some((ld, la)) = last {
                    assert!(d >= ld && a <= la);
                }
                last = Some((d, a));
            }
        }
    }

    #[test]
    fn linear_in_tokens() {
        let p = DeviceProfile::default();
        let model = ModelProfile::olmoe();
        let placement = Placement {
            gamma: 0.125,
            ..Placement::default()
        };
        let a = derive_workload(&model, &placement, 16).unwrap();
        let b = derive_workload(&model, &placement, 32).unwrap();
        assert!((b.digital_ops - 2.0 * a.digital_ops).abs() <= 1e-6 * b.digital_ops);
        assert!((b.analog_ops[TILE_MVM] - 2.0 * a.analog_ops[TILE_MVM]).abs() <= 1e-9 * b.analog_ops[TILE_MVM]);
        let (ta, _) = analog_estimates(&a, &p).unwrap();
        let (tb, _) = analog_estimates(&b, &p).unwrap();
        assert!((ta - tb).abs() <= 1e-9 * ta);
    }

    #[test]
    fn default_rows_keep_published_ordering() {
        let rows = perf_table(&ModelProfile::olmoe(), &DeviceProfile::default(), 32, &[0.0, 0.125, 0.25], false).unwrap();
        let (digital, analog, het) = (&rows[0], &rows[1], &rows[2..]);
        assert!(analog.throughput < digital.throughput);
        assert!(analog.energy_efficiency > het[0].energy_efficiency);
        for h in het {
            assert!(h.throughput > digital.throughput && h.energy_efficiency > digital.energy_efficiency);
        }
        assert!(het.windows(2).all(|w| w[1].throughput < w[0].throughput));
    }

    #[test]
    fn table_csv_layout() {
        let rows = perf_table(&ModelProfile::olmoe(), &DeviceProfile::default(), 32, &[0.0, 0.125, 0.25], false).unwrap();
        assert_eq!(rows.len(), 5);
        let mut buf = Vec::new();
        write_perf_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().starts_with("100% (FP-16),all,"));
    }
}
