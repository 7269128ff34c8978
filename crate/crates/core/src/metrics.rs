//! Evaluation formulas: total pruning accuracy, cycle time, and efficiency,
//! bud-count variability statistics, pre-prune population statistics, the
//! design-combination report, and the per-acre economics calculator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EconConfig;
use crate::rng;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined: zero pruning locations")]
    UndefinedMetric,
    #[error("missing cost-model field {0}")]
    MissingField(&'static str),
}

/// Stage efficiencies, each in [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EfficiencyLedger {
    pub bud_detection: f64,
    pub reconstruction_3d: f64,
    pub cane_segmentation: f64,
    pub cut_point_identification: f64,
    pub planning: f64,
    pub execute: f64,
}

impl EfficiencyLedger {
    pub fn registration(&self) -> f64 {
        self.bud_detection * self.reconstruction_3d
    }

    pub fn localization(&self) -> f64 {
        self.cane_segmentation * self.cut_point_identification
    }

    pub fn execution(&self) -> f64 {
        self.planning * self.execute
    }
}

/// Total pruning accuracy: valid cuts over total pruning locations.
pub fn tpa(valid_cuts: usize, pruning_locations: usize) -> Result<f64, MetricsError> {
    if pruning_locations == 0 {
        return Err(MetricsError::UndefinedMetric);
    }
    Ok(valid_cuts as f64 / pruning_locations as f64)
}

/// Total pruning cycle: summed stage times for one side visit [s].
pub fn tpc(perception: f64, planning: f64, execution: f64) -> f64 {
    perception + planning + execution
}

/// Two-sided cycle: both side visits summed.
pub fn tpc_two_sided(side_a: (f64, f64, f64), side_b: (f64, f64, f64)) -> f64 {
    tpc(side_a.0, side_a.1, side_a.2) + tpc(side_b.0, side_b.1, side_b.2)
}

/// Total pruning efficiency: the product of the six ledger terms, grouped as
/// registration (bud detection x 3D reconstruction), localization (cane
/// segmentation x cut-point identification), and execution (planning x
/// execute).
pub fn tpe(ledger: &EfficiencyLedger) -> f64 {
    ledger.registration() * ledger.localization() * ledger.execution()
}

/// Bud-count dispersion for the as-given population, the ideal fully-pruned
/// population (all counts above the rule clamped to it), and the achieved
/// population in which each prunable cane is clamped with probability `tpa`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariabilityStats {
    pub as_given: (f64, f64),
    pub ideal: (f64, f64),
    pub achieved: (f64, f64),
}

pub fn variability_stats(
    buds_per_cane: &[usize],
    rule_buds: usize,
    tpa: f64,
    seed: u64,
    population_std: bool,
) -> VariabilityStats {
    let as_given: Vec<f64> = buds_per_cane.iter().map(|&b| b as f64).collect();
    let ideal: Vec<f64> =
        buds_per_cane.iter().map(|&b| b.min(rule_buds) as f64).collect();
    let mut stream = rng::derive(seed, &[0x7A12]);
    let achieved: Vec<f64> = buds_per_cane
        .iter()
        .map(|&b| {
            if b > rule_buds && stream.random_bool(tpa.clamp(0.0, 1.0)) {
                rule_buds as f64
            } else {
                b as f64
            }
        })
        .collect();
    VariabilityStats {
        as_given: mean_std(&as_given, population_std),
        ideal: mean_std(&ideal, population_std),
        achieved: mean_std(&achieved, population_std),
    }
}

fn mean_std(data: &[f64], population: bool) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let denom = if population { n } else { (n - 1.0).max(1.0) };
    let var = data.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / denom;
    (mean, var.sqrt())
}

/// Pre-prune population statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrePruneStats {
    pub total_canes: usize,
    pub total_buds: usize,
    /// Canes with more than the rule count; these need a cut.
    pub prunable: usize,
    /// Fractions (exactly n, more than n, fewer than n); None for an empty
    /// population.
    pub fractions: Option<(f64, f64, f64)>,
}

pub fn preprune_stats(buds_per_cane: &[usize], rule_buds: usize) -> PrePruneStats {
    let total_canes = buds_per_cane.len();
    let total_buds = buds_per_cane.iter().sum();
    let exact = buds_per_cane.iter().filter(|&&b| b == rule_buds).count();
    let more = buds_per_cane.iter().filter(|&&b| b > rule_buds).count();
    let fewer = total_canes - exact - more;
    PrePruneStats {
        total_canes,
        total_buds,
        prunable: more,
        fractions: (total_canes > 0).then(|| {
            let n = total_canes as f64;
            (exact as f64 / n, more as f64 / n, fewer as f64 / n)
        }),
    }
}

/// One row of the design-combination table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignRow {
    pub combination: String,
    pub ledger: EfficiencyLedger,
    pub tpe: f64,
    pub tpc_s: f64,
}

/// Builds the design table from (name, ledger, cycle time) triples.
pub fn design_report(scenarios: &[(String, EfficiencyLedger, f64)]) -> Vec<DesignRow> {
    scenarios
        .iter()
        .map(|(name, ledger, tpc_s)| DesignRow {
            combination: name.clone(),
            ledger: *ledger,
            tpe: tpe(ledger),
            tpc_s: *tpc_s,
        })
        .collect()
}

/// Reference ledgers for the five studied design combinations.
pub fn reference_design_ledgers() -> Vec<(String, EfficiencyLedger, f64)> {
    let base = EfficiencyLedger {
        bud_detection: 0.95,
        reconstruction_3d: 0.96,
        cane_segmentation: 0.87,
        cut_point_identification: 0.97,
        planning: 0.95,
        execute: 0.84,
    };
    vec![
        ("all_inclusive".into(), base, 245.0),
        (
            "single_side".into(),
            EfficiencyLedger { planning: 0.67, execute: 0.59, ..base },
            137.0,
        ),
        (
            "full_vine_obstacle".into(),
            EfficiencyLedger { planning: 0.84, execute: 0.73, ..base },
            177.0,
        ),
        (
            "single_stereo".into(),
            EfficiencyLedger {
                bud_detection: 0.75,
                reconstruction_3d: 0.68,
                cane_segmentation: 0.64,
                cut_point_identification: 0.68,
                planning: 0.92,
                execute: 0.84,
            },
            105.0,
        ),
        (
            "no_tsp".into(),
            EfficiencyLedger { planning: 0.92, execute: 0.84, ..base },
            164.0,
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningTechnology {
    Hand,
    MechAssisted,
    RoboticAssisted,
    FullyAutonomous,
}

/// Per-acre cost with its arithmetic breakdown. `display` carries the
/// presentation-rounded figure; `exact` the unrounded arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub technology: PruningTechnology,
    pub exact: f64,
    pub display: f64,
    pub components: Vec<(String, f64)>,
}

/// Cost per acre for one technology.
///
/// hand: labor hours x wage x (1 + benefit). mech-assisted: pre-prune
/// equipment + labor plus hand follow-up. robotic: robot fuel + generator
/// fuel + lubrication, plus the pre-prune pass when assisted. Rounding to
/// cents happens only at presentation; the robotic-assisted combined figure
/// additionally rounds to the dime the way the reference tables print it.
pub fn econ_cost(model: &EconConfig, tech: PruningTechnology) -> Result<CostBreakdown, MetricsError> {
    let get = |v: Option<f64>, name: &'static str| v.ok_or(MetricsError::MissingField(name));
    let wage = get(model.wage_per_hour, "wage_per_hour")?;
    let benefit = get(model.benefit_fraction, "benefit_fraction")?;
    let direct = wage * (1.0 + benefit);

    let preprune = |components: &mut Vec<(String, f64)>| -> Result<f64, MetricsError> {
        let eq_h = get(model.preprune_equipment_hours, "preprune_equipment_hours")?;
        let eq_rate = get(model.preprune_equipment_rate, "preprune_equipment_rate")?;
        let lab_h = get(model.preprune_labor_hours, "preprune_labor_hours")?;
        let equipment = eq_h * eq_rate;
        let labor = lab_h * direct;
        components.push(("preprune_equipment".into(), equipment));
        components.push(("preprune_labor".into(), labor));
        Ok(equipment + labor)
    };

    let robotic = |components: &mut Vec<(String, f64)>| -> Result<f64, MetricsError> {
        let fuel_price = get(model.fuel_price_per_gallon, "fuel_price_per_gallon")?;
        let robot_gal = get(model.robot_fuel_gallons, "robot_fuel_gallons")?;
        let gen_gal = get(model.generator_fuel_gallons, "generator_fuel_gallons")?;
        let lube = get(model.lubrication_per_hour, "lubrication_per_hour")?;
        let hours = get(model.robot_run_hours, "robot_run_hours")?;
        let robot_fuel = robot_gal * fuel_price;
        let gen_fuel = gen_gal * fuel_price;
        let lubrication = lube * hours;
        components.push(("robot_fuel".into(), robot_fuel));
        components.push(("generator_fuel".into(), gen_fuel));
        components.push(("lubrication".into(), lubrication));
        Ok(robot_fuel + gen_fuel + lubrication)
    };

    let mut components = Vec::new();
    let exact = match tech {
        PruningTechnology::Hand => {
            let hours = get(model.hand_labor_hours, "hand_labor_hours")?;
            let cost = hours * direct;
            components.push(("hand_labor".into(), cost));
            cost
        }
        PruningTechnology::MechAssisted => {
            let pre = preprune(&mut components)?;
            let follow_h = get(model.followup_labor_hours, "followup_labor_hours")?;
            let follow = follow_h * direct;
            components.push(("followup_labor".into(), follow));
            pre + follow
        }
        PruningTechnology::RoboticAssisted => {
            let robot = robotic(&mut components)?;
            let pre = preprune(&mut components)?;
            robot + pre
        }
        PruningTechnology::FullyAutonomous => robotic(&mut components)?,
    };
    // The combined robotic-assisted figure is printed to the dime.
    let display = match tech {
        PruningTechnology::RoboticAssisted => round_to(exact, 10.0),
        _ => round_to(exact, 100.0),
    };
    Ok(CostBreakdown { technology: tech, exact, display, components })
}

/// Half-up rounding to 1/divisor dollars (100 = cents, 10 = dimes).
fn round_to(x: f64, divisor: f64) -> f64 {
    (x * divisor).round() / divisor
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tpa_reference_values() {
        assert_relative_eq!(tpa(83, 95).unwrap(), 0.8737, epsilon = 1e-4);
        assert_relative_eq!(tpa(7, 7).unwrap(), 1.0);
        assert_relative_eq!(tpa(0, 12).unwrap(), 0.0);
        assert!(tpa(1, 0).is_err());
    }

    #[test]
    fn tpc_sums_stages() {
        assert_relative_eq!(tpc(21.8, 78.33, 36.87), 137.0);
        assert_relative_eq!(tpc(0.0, 0.0, 0.0), 0.0);
        // one full side plus the second-side visit
        assert_relative_eq!(
            tpc_two_sided((21.8, 78.33, 36.87), (21.8, 36.86, 17.34)),
            213.0
        );
    }

    #[test]
    fn tpe_reference_rows() {
        let rows = reference_design_ledgers();
        let expected = [0.61, 0.30, 0.47, 0.17, 0.59];
        for ((_, ledger, _), want) in rows.iter().zip(expected) {
            assert!(
                (tpe(ledger) - want).abs() <= 0.005,
                "tpe {} vs {want}",
                tpe(ledger)
            );
        }
    }

    #[test]
    fn tpe_zero_absorbs() {
        let mut ledger = reference_design_ledgers()[0].1;
        ledger.planning = 0.0;
        assert_relative_eq!(tpe(&ledger), 0.0);
    }

    #[test]
    fn tpe_scales_linearly_in_each_term() {
        let base = reference_design_ledgers()[0].1;
        let t0 = tpe(&base);
        let scaled = EfficiencyLedger { cane_segmentation: base.cane_segmentation * 0.5, ..base };
        assert_relative_eq!(tpe(&scaled), t0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn variability_orderings() {
        // Paper-like population: categories 25/35/40 at n = 4.
        let mut counts = Vec::new();
        for i in 0..268 {
            counts.push(match i % 20 {
                0..=4 => 4,
                5..=11 => 5 + (i % 7),
                _ => 1 + (i % 3),
            });
        }
        let stats = variability_stats(&counts, 4, 0.87, 9, true);
        assert!(stats.ideal.1 <= stats.achieved.1 + 1e-12);
        assert!(stats.achieved.1 <= stats.as_given.1 + 1e-12);
    }

    #[test]
    fn variability_trivial_cases() {
        let all_low = [4usize, 3, 4, 2];
        let s = variability_stats(&all_low, 4, 1.0, 1, true);
        assert_relative_eq!(s.ideal.0, s.as_given.0);
        assert_relative_eq!(s.ideal.1, s.as_given.1);

        let sixes = [6usize; 4];
        let s = variability_stats(&sixes, 4, 1.0, 1, true);
        assert_relative_eq!(s.ideal.0, 4.0);
        assert_relative_eq!(s.ideal.1, 0.0);
    }

    #[test]
    fn preprune_stats_basic() {
        let every_exact = [4usize; 10];
        let s = preprune_stats(&every_exact, 4);
        assert_eq!(s.fractions, Some((1.0, 0.0, 0.0)));
        assert_eq!(s.prunable, 0);

        let s = preprune_stats(&[], 4);
        assert!(s.fractions.is_none());
        assert_eq!(s.total_canes, 0);
    }

    #[test]
    fn design_report_reproduces_tpe_column() {
        let rows = design_report(&reference_design_ledgers());
        let expected = [0.61, 0.30, 0.47, 0.17, 0.59];
        for (row, want) in rows.iter().zip(expected) {
            assert!((row.tpe - want).abs() <= 0.005);
        }
        let single = design_report(&reference_design_ledgers()[..1]);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn econ_reference_costs() {
        let model = EconConfig::default();
        let hand = econ_cost(&model, PruningTechnology::Hand).unwrap();
        assert_relative_eq!(hand.display, 672.00, epsilon = 1e-9);

        let mech = econ_cost(&model, PruningTechnology::MechAssisted).unwrap();
        assert_relative_eq!(mech.display, 459.25, epsilon = 1e-9);

        let auto = econ_cost(&model, PruningTechnology::FullyAutonomous).unwrap();
        assert_relative_eq!(auto.display, 80.64, epsilon = 1e-9);

        let assisted = econ_cost(&model, PruningTechnology::RoboticAssisted).unwrap();
        assert_relative_eq!(assisted.exact, 161.89, epsilon = 1e-9);
        assert_relative_eq!(assisted.display, 161.90, epsilon = 1e-9);
    }

    #[test]
    fn econ_zero_inputs_zero_cost() {
        let model = EconConfig {
            hand_labor_hours: Some(0.0),
            robot_fuel_gallons: Some(0.0),
            generator_fuel_gallons: Some(0.0),
            lubrication_per_hour: Some(0.0),
            ..EconConfig::default()
        };
        assert_relative_eq!(econ_cost(&model, PruningTechnology::Hand).unwrap().exact, 0.0);
        assert_relative_eq!(
            econ_cost(&model, PruningTechnology::FullyAutonomous).unwrap().exact,
            0.0
        );
    }

    #[test]
    fn econ_missing_field_named() {
        let model = EconConfig { wage_per_hour: None, ..EconConfig::default() };
        match econ_cost(&model, PruningTechnology::Hand) {
            Err(MetricsError::MissingField(name)) => assert_eq!(name, "wage_per_hour"),
            other => panic!("expected missing-field error, got {other:?}"),
        }
    }

    #[test]
    fn econ_linear_in_hours_wage_fuel() {
        let base = EconConfig::default();
        let hand0 = econ_cost(&base, PruningTechnology::Hand).unwrap().exact;
        let double_hours =
            EconConfig { hand_labor_hours: Some(64.0), ..base.clone() };
        assert_relative_eq!(
            econ_cost(&double_hours, PruningTechnology::Hand).unwrap().exact,
            2.0 * hand0
        );
        let double_wage = EconConfig { wage_per_hour: Some(30.0), ..base.clone() };
        assert_relative_eq!(
            econ_cost(&double_wage, PruningTechnology::Hand).unwrap().exact,
            2.0 * hand0
        );
        let auto0 = econ_cost(&base, PruningTechnology::FullyAutonomous).unwrap().exact;
        let lube = base.lubrication_per_hour.unwrap() * base.robot_run_hours.unwrap();
        let double_fuel =
            EconConfig { fuel_price_per_gallon: Some(4.76), ..base.clone() };
        let auto2 = econ_cost(&double_fuel, PruningTechnology::FullyAutonomous).unwrap().exact;
        assert_relative_eq!(auto2 - lube, 2.0 * (auto0 - lube), epsilon = 1e-9);
    }

    #[test]
    fn mech_assisted_combined_to_the_cent() {
        let model = EconConfig::default();
        let mech = econ_cost(&model, PruningTechnology::MechAssisted).unwrap();
        let pre: f64 = mech
            .components
            .iter()
            .filter(|(n, _)| n.starts_with("preprune"))
            .map(|(_, v)| v)
            .sum();
        let follow: f64 = mech
            .components
            .iter()
            .filter(|(n, _)| n == "followup_labor")
            .map(|(_, v)| v)
            .sum();
        assert_relative_eq!((pre * 100.0).round() / 100.0, 81.25);
        assert_relative_eq!((follow * 100.0).round() / 100.0, 378.00);
        assert_relative_eq!(mech.display, 459.25);
    }
}
