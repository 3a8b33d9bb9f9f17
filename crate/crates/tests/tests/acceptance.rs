//! Workspace acceptance suite. Runs each criterion at its stated tolerance,
//! prints one PASS/FAIL line per criterion and exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedsim_cli::app::run_cli;
use fedsim_cli::{preset, run_experiment, ExperimentConfig};

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnOnce(&mut Accuracies) -> Outcome>;

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    if took > limit {
        return Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
    }
    Ok(format!("{detail}; {took:.1?}"))
}

type NamedCheck = (&'static str, fn() -> support::Check);

fn all(checks: &[NamedCheck]) -> Outcome {
    let mut failed = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok(format!("{} suites", checks.len()))
    } else {
        Err(failed.join("; "))
    }
}

fn final_accuracy(cfg: &ExperimentConfig) -> Result<f64, String> {
    let result = run_experiment(cfg).map_err(|e| e.to_string())?;
    Ok(result.records.last().ok_or("no rounds")?.test_accuracy)
}

/// Final accuracy of each named preset, run once and cached.
struct Accuracies(BTreeMap<String, f64>);

impl Accuracies {
    fn get(&mut self, name: &str) -> Result<f64, String> {
        if let Some(a) = self.0.get(name) {
            return Ok(*a);
        }
        let a = final_accuracy(&preset(name).map_err(|e| e.to_string())?)?;
        self.0.insert(name.to_string(), a);
        Ok(a)
    }
}

fn oracles() -> Outcome {
    all(&[
        ("krum", || support::krum_matches_bruteforce(100)),
        ("geometric median", || support::geomedian_beats_lattice(20)),
        ("robust statistics", || {
            support::robust_stats_match_reference(200)
        }),
        ("gradients", || {
            support::gradients_match_finite_differences(20)
        }),
    ])
}

fn invariants() -> Outcome {
    all(&[
        ("model determinism", support::model_ops_are_deterministic),
        (
            "partition conservation",
            support::partition_conserves_samples,
        ),
        ("zero-model loss", support::zero_logreg_loss_is_ln_classes),
        ("stage order", support::stage_order_is_fixed),
        ("passive isolation", support::passive_attack_changes_nothing),
        ("no-hook equivalence", support::no_hooks_is_plain_fedavg),
        ("registry singleton", support::registry_is_singleton),
        ("fedavg envelope", || support::fedavg_stays_in_envelope(200)),
        ("permutation invariance", || {
            support::aggregation_is_permutation_invariant(50)
        }),
        ("run determinism", support::runs_are_deterministic),
        ("honest updates untouched", || {
            support::attack_model_respects_honest_clients(50)
        }),
        (
            "label flip keeps features",
            support::poison_data_keeps_features,
        ),
        (
            "reconstruction is passive",
            support::reconstruction_leaves_inputs_untouched,
        ),
        ("flip involution", || support::flip_is_an_involution(100)),
        ("weiszfeld monotone", || {
            support::weiszfeld_objective_never_increases(50)
        }),
        ("1-d reductions", || support::scalar_reductions(50)),
        ("trimmed mean bounds", || support::trimmed_mean_bounds(100)),
        ("translation equivariance", || {
            support::translation_equivariance(30)
        }),
        ("foolsgold bounds", || support::foolsgold_weight_bounds(100)),
        ("stage identity", support::defenses_are_identity_off_stage),
        ("defender state", support::defender_state_round_trips),
    ])
}

fn attack_ordering(acc: &mut Accuracies) -> Outcome {
    let benign = acc.get("benign")?;
    let flip = acc.get("attack-byz_flip")?;
    let label = acc.get("attack-label_flip")?;
    let random = acc.get("attack-byz_random")?;
    let zero = acc.get("attack-byz_zero")?;
    let detail = format!(
        "benign {benign:.3}, byz_flip {flip:.3}, label_flip {label:.3}, byz_random {random:.3}, byz_zero {zero:.3}"
    );
    let mut problems = Vec::new();
    if !(benign >= flip && flip >= label && label > random) {
        problems
            .push("ordering benign >= byz_flip >= label_flip > byz_random violated".to_string());
    }
    if benign - random < 0.25 {
        problems.push(format!(
            "benign - byz_random = {:.3} < 0.25",
            benign - random
        ));
    }
    if benign - zero < 0.25 {
        problems.push(format!("benign - byz_zero = {:.3} < 0.25", benign - zero));
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn defense_cost(acc: &mut Accuracies) -> Outcome {
    let benign = acc.get("benign")?;
    let test_samples = preset("benign")
        .map_err(|e| e.to_string())?
        .data
        .test_samples;
    // one test sample: the resolution of the accuracy metric
    let tie = 1.0 / test_samples as f64;
    let mut problems = Vec::new();
    let mut worst = (String::new(), f64::NEG_INFINITY);
    for name in fedsim_cli::config::DEFENSE_TYPES {
        let gap = benign - acc.get(&format!("defense-{name}"))?;
        if gap > 0.10 {
            problems.push(format!("{name} gap {gap:.3} > 0.10"));
        }
        if gap > worst.1 {
            worst = (name.to_string(), gap);
        }
    }
    let gaps: Vec<(&str, f64)> = ["mkrum", "foolsgold", "rfa"]
        .iter()
        .map(|d| Ok((*d, benign - acc.get(&format!("defense-{d}"))?)))
        .collect::<Result<_, String>>()?;
    let rfa = gaps[2].1;
    let largest = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    if rfa < largest - tie {
        problems.push(format!(
            "rfa gap {rfa:.3} is not the largest among {gaps:.3?}"
        ));
    }
    let detail = format!(
        "largest gap {} {:.3}; grid gaps {gaps:.3?}",
        worst.0, worst.1
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn krum_recovery(acc: &mut Accuracies) -> Outcome {
    let benign = acc.get("benign")?;
    let defended = acc.get("attackXdefense-byz_random-mkrum")?;
    let open = acc.get("attack-byz_random")?;
    let detail = format!("benign {benign:.3}, mkrum {defended:.3}, undefended {open:.3}");
    if benign - defended <= 0.05 && benign - open >= 0.25 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dlg() -> Outcome {
    let out = support::dlg_logreg_cases(20, &support::DLG_ACCEPTANCE)?;
    let detail = format!("{}/{} cases reconstructed", out.successes, out.cases);
    if out.successes >= 18 {
        Ok(detail)
    } else {
        let failed: Vec<String> = out
            .details
            .iter()
            .enumerate()
            .filter(|(_, (loss, err))| !(*loss < 1e-6 && *err < 0.1))
            .map(|(i, (loss, err))| format!("case {i}: loss {loss:.2e}, error {err:.3}"))
            .collect();
        Err(format!("{detail}; {}", failed.join(", ")))
    }
}

fn noise() -> Outcome {
    let (weak, crfl) = support::noise_variance_deviation(10_000, 0.05)?;
    let detail = format!("relative variance error weak_dp {weak:.4}, crfl {crfl:.4}");
    if weak <= 0.05 && crfl <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metrics_without_wall_time(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let args = [
            "fedsim",
            "run",
            "--preset",
            "attackXdefense-byz_random-mkrum",
            "--output-dir",
        ];
        let mut log = Vec::new();
        let status = run_cli(
            args.iter()
                .map(Into::into)
                .chain([out_dir.clone().into_os_string()]),
            &mut std::io::sink(),
            &mut log,
        );
        if status != 0 {
            return Err(format!(
                "run {run} exited with {status}: {}",
                String::from_utf8_lossy(&log)
            ));
        }
        outputs.push(metrics_without_wall_time(&out_dir.join("metrics.csv"))?);
    }
    if outputs[0] == outputs[1] {
        Ok(format!(
            "{} metric rows identical",
            outputs[0].lines().count() - 1
        ))
    } else {
        Err("metrics.csv differs between runs".into())
    }
}

fn main() -> ExitCode {
    // the seed under test comes from the preset
    std::env::remove_var("FEDSIM_SEED");
    let mut acc = Accuracies(BTreeMap::new());
    let criteria: Vec<(&str, Criterion)> = vec![
        (
            "1 oracle suites",
            Box::new(|_| timed(Duration::from_secs(60), oracles)),
        ),
        ("2 invariant suites", Box::new(|_| invariants())),
        (
            "3 attack impact ordering",
            Box::new(|a| timed(Duration::from_secs(120), || attack_ordering(a))),
        ),
        ("4 defense cost without attack", Box::new(defense_cost)),
        ("5 multi-krum recovery", Box::new(krum_recovery)),
        (
            "6 gradient inversion",
            Box::new(|_| timed(Duration::from_secs(30), dlg)),
        ),
        ("7 noise statistics", Box::new(|_| noise())),
        (
            "8 end-to-end determinism",
            Box::new(|_| end_to_end_determinism()),
        ),
    ];
    let mut failures = 0;
    for (name, criterion) in criteria {
        match criterion(&mut acc) {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
