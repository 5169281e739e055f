use std::fs;
use std::path::PathBuf;

use serde_json::{json, Value};
use triport_core::analysis;
use triport_core::elements::{
    hybrid_multiport, qft_multiport, reck_decompose, recompose, MeshElement, MeshPlan, ModeUnitary,
};
use triport_core::noise::{self, NoiseParams};
use triport_core::protocol::{self, CorrectionOp, QuditState};

use crate::config::{ElementsChoice, VariantChoice};
use crate::error::CliError;
use crate::output::{self, Artifact, Sink};

fn emit(sink: &Sink, artifact: Artifact) -> Result<(), CliError> {
    for path in sink.write(artifact)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn amplitude_pairs(state: &QuditState) -> Value {
    Value::Array(state.amps().iter().map(|a| json!([a.re, a.im])).collect())
}

fn bell_name(index: Option<protocol::BellIndex>) -> Value {
    match index {
        Some(b) => Value::String(format!("psi_{}{}", b.shift, b.phase)),
        None => Value::Null,
    }
}

fn correction_value(op: &CorrectionOp) -> Value {
    let (kind, u) = match op {
        CorrectionOp::Weyl(u) => ("weyl", u),
        CorrectionOp::Filtered(u) => ("filtered", u),
    };
    let n = u.dim();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let z = u.entry(i, j);
            row.push(json!([z.re, z.im]));
        }
        rows.push(Value::Array(row));
    }
    json!({ "entries": rows, "kind": kind, "size": n })
}

pub fn teleport(
    input_text: &str,
    variant: VariantChoice,
    elements: ElementsChoice,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    let input: QuditState = input_text
        .parse()
        .map_err(|e: protocol::ProtocolError| CliError::Config(e.to_string()))?;
    if input.dim() != 3 {
        return Err(CliError::Config(format!(
            "teleport input needs 3 amplitudes, got {}",
            input.dim()
        )));
    }
    let run = protocol::run_teleport(&input, variant.to_core(), elements.to_core())?;
    let pipeline = protocol::assemble_pipeline(&input, variant.to_core(), elements.to_core())?;

    let resolved = json!({
        "elements": elements.name(),
        "input": input_text,
        "seed": seed,
        "variant": variant.name(),
    });
    let patterns: Vec<Value> = run
        .outcomes
        .iter()
        .map(|o| {
            json!({
                "bell": bell_name(o.bell_index),
                "fidelity": o.fidelity,
                "pattern": o.pattern,
                "probability": o.probability,
            })
        })
        .collect();
    let table: Vec<Value> = pipeline
        .patterns
        .iter()
        .map(|p| {
            json!({
                "bell": bell_name(p.bell_index),
                "correction": correction_value(&p.correction),
                "modes": p.modes.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
                "pattern": p.name,
            })
        })
        .collect();
    let results = json!({
        "elements": elements.name(),
        "input": amplitude_pairs(&input),
        "mean_fidelity": run.mean_fidelity,
        "pattern_table": table,
        "patterns": patterns,
        "total_probability": run.total_probability,
        "variant": variant.name(),
    });
    let mut csv = String::from("pattern,probability,fidelity\n");
    for o in &run.outcomes {
        csv.push_str(&format!(
            "{},{:.12e},{:.12e}\n",
            o.pattern, o.probability, o.fidelity
        ));
    }

    println!(
        "{} accepted patterns, total probability {:.9}, mean fidelity {:.9}",
        run.outcomes.len(),
        run.total_probability,
        run.mean_fidelity
    );
    emit(
        sink,
        Artifact {
            kind: "teleport",
            seed,
            config_hash: output::config_hash("teleport", &resolved),
            results,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn mub_suite(
    variant: VariantChoice,
    elements: ElementsChoice,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for (label, state) in protocol::mub_states() {
        let run = protocol::run_teleport(&state, variant.to_core(), elements.to_core())?;
        entries.push(analysis::MubReportEntry {
            label: label.clone(),
            fidelity: run.mean_fidelity,
            sigma: 0.0,
        });
        rows.push(json!({
            "fidelity": run.mean_fidelity,
            "label": label,
            "sigma": 0.0,
            "total_probability": run.total_probability,
        }));
    }
    let report = analysis::mub_suite_report(entries)?;
    let mut csv = String::from("label,fidelity,sigma\n");
    for entry in &report.entries {
        csv.push_str(&format!(
            "{},{:.12e},{:.12e}\n",
            entry.label, entry.fidelity, entry.sigma
        ));
    }

    let resolved = json!({
        "elements": elements.name(),
        "seed": seed,
        "variant": variant.name(),
    });
    let results = json!({
        "beats_classical": report.beats_classical,
        "beats_qubit_subspace": report.beats_qubit_subspace,
        "classical_bound": report.classical_bound,
        "elements": elements.name(),
        "mean_fidelity": report.mean_fidelity,
        "qubit_subspace_bound": report.qubit_subspace_bound,
        "states": rows,
        "variant": variant.name(),
    });
    println!(
        "mean fidelity {:.9} over {} states; beats classical bound: {}; beats qubit-subspace bound: {}",
        report.mean_fidelity,
        report.entries.len(),
        report.beats_classical,
        report.beats_qubit_subspace
    );
    emit(
        sink,
        Artifact {
            kind: "mub-suite",
            seed,
            config_hash: output::config_hash("mub-suite", &resolved),
            results,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn sweep_landscape(
    p_d_grid: Vec<f64>,
    p_grid: Vec<f64>,
    params: NoiseParams,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    let sweep = noise::fidelity_landscape(&p_d_grid, &p_grid, &params)?;

    let resolved = json!({
        "grid_p": p_grid,
        "grid_p_d": p_d_grid,
        "noise": serde_json::to_value(params)?,
        "seed": seed,
    });
    let flat: Vec<f64> = sweep.fidelity.iter().flatten().copied().collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} x {} landscape, fidelity {lo:.6} to {hi:.6}",
        p_d_grid.len(),
        p_grid.len()
    );
    let csv = sweep.to_csv();
    emit(
        sink,
        Artifact {
            kind: "sweep-landscape",
            seed,
            config_hash: output::config_hash("sweep-landscape", &resolved),
            results: serde_json::to_value(sweep)?,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn sweep_splitting(
    deviations: Vec<f64>,
    trials: u32,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    let sweep = noise::splitting_ratio_perturbation(&deviations, trials, seed)?;

    let resolved = json!({
        "deviations": deviations,
        "seed": seed,
        "trials": trials,
    });
    let last = deviations.len() - 1;
    println!(
        "{} deviation points, {} trials each; mean fidelity {:.6} at {:.3} half-width",
        deviations.len(),
        trials,
        sweep.fidelity[last][0],
        deviations[last]
    );
    let csv = sweep.to_csv();
    emit(
        sink,
        Artifact {
            kind: "sweep-splitting",
            seed,
            config_hash: output::config_hash("sweep-splitting", &resolved),
            results: serde_json::to_value(sweep)?,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn hom(
    bandwidth_nm: f64,
    visibility: f64,
    delay_max_fs: f64,
    delay_step_fs: f64,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    for (name, value) in [
        ("delay_max_fs", delay_max_fs),
        ("delay_step_fs", delay_step_fs),
    ] {
        if !value.is_finite() || value <= 0.0 {
            return Err(CliError::Config(format!(
                "{name} = {value} must be a positive number"
            )));
        }
    }
    let steps = (delay_max_fs / delay_step_fs).floor() as i64;
    let delays: Vec<f64> = (-steps..=steps).map(|k| k as f64 * delay_step_fs).collect();
    let scan = noise::hom_scan(&delays, bandwidth_nm, visibility)?;
    let recovered = noise::extract_visibility(&scan)?;
    let tau_c = noise::coherence_time_fs(bandwidth_nm)?;

    let resolved = json!({
        "bandwidth_nm": bandwidth_nm,
        "delay_max_fs": delay_max_fs,
        "delay_step_fs": delay_step_fs,
        "seed": seed,
        "visibility": visibility,
    });
    let results = json!({
        "bandwidth_nm": bandwidth_nm,
        "recovered_visibility": recovered,
        "scan": scan.iter().map(|&(t, c)| json!([t, c])).collect::<Vec<_>>(),
        "tau_c_fs": tau_c,
        "visibility": visibility,
    });
    let mut csv = String::from("delay_fs,coincidence\n");
    for &(t, c) in &scan {
        csv.push_str(&format!("{t},{c:.12e}\n"));
    }

    println!(
        "{}-point scan, coherence time {tau_c:.1} fs, recovered visibility {recovered:.6}",
        scan.len()
    );
    emit(
        sink,
        Artifact {
            kind: "hom",
            seed,
            config_hash: output::config_hash("hom", &resolved),
            results,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn decompose(
    modes: usize,
    elements: ElementsChoice,
    seed: u64,
    sink: &Sink,
) -> Result<(), CliError> {
    if !(2..=6).contains(&modes) {
        return Err(CliError::Config(format!(
            "modes = {modes} outside the supported range 2 to 6"
        )));
    }
    let unitary: ModeUnitary = match elements {
        ElementsChoice::Ideal => qft_multiport(modes)?,
        ElementsChoice::Experimental => {
            if modes != 3 {
                return Err(CliError::Config(
                    "the experimental network is a three-mode device".into(),
                ));
            }
            hybrid_multiport().transfer()?
        }
    };
    let plan = reck_decompose(&unitary);
    let rebuilt = recompose(&plan)?;
    let mut max_error = 0.0f64;
    for i in 0..modes {
        for j in 0..modes {
            max_error = max_error.max((rebuilt.entry(i, j) - unitary.entry(i, j)).norm());
        }
    }
    if max_error > 1e-10 {
        return Err(CliError::Invariant(format!(
            "mesh recomposition error {max_error:e} exceeds 1e-10"
        )));
    }

    let resolved = json!({
        "elements": elements.name(),
        "modes": modes,
        "seed": seed,
    });
    let results = json!({
        "elements": elements.name(),
        "max_error": max_error,
        "mesh": mesh_value(&plan),
        "modes": modes,
    });
    let csv = mesh_csv(&plan);

    println!(
        "{} mesh elements, recomposition error {max_error:.3e}",
        plan.elements.len()
    );
    emit(
        sink,
        Artifact {
            kind: "decompose",
            seed,
            config_hash: output::config_hash("decompose", &resolved),
            results,
            csv: Some(csv),
            text: Some(plan.to_text()),
        },
    )
}

fn mesh_value(plan: &MeshPlan) -> Value {
    let elements: Vec<Value> = plan
        .elements
        .iter()
        .map(|el| match el {
            MeshElement::Rotation { i, j, theta, phi } => json!({
                "i": i, "j": j, "kind": "rotation", "phi": phi, "theta": theta,
            }),
            MeshElement::Phase { i, phi } => json!({
                "i": i, "kind": "phase", "phi": phi,
            }),
        })
        .collect();
    json!({ "elements": elements, "modes": plan.modes })
}

fn mesh_csv(plan: &MeshPlan) -> String {
    let mut out = String::from("element,i,j,theta,phi\n");
    for el in &plan.elements {
        match el {
            MeshElement::Rotation { i, j, theta, phi } => {
                out.push_str(&format!("rotation,{i},{j},{theta:.11e},{phi:.11e}\n"));
            }
            MeshElement::Phase { i, phi } => {
                out.push_str(&format!("phase,{i},,,{phi:.11e}\n"));
            }
        }
    }
    out
}

pub fn bounds(seed: u64, sink: &Sink) -> Result<(), CliError> {
    let classical = analysis::classical_bound(3)?;
    let qubit = analysis::qubit_subspace_bound()?;

    println!("classical bound {classical}");
    println!("qubit-subspace bound {qubit:.9}");
    println!("a teleportation suite passes when its mean fidelity exceeds both");

    let resolved = json!({ "seed": seed });
    let results = json!({ "classical": classical, "qubit_subspace": qubit });
    let csv = format!("bound,value\nclassical,{classical:.12e}\nqubit_subspace,{qubit:.12e}\n");
    emit(
        sink,
        Artifact {
            kind: "bounds",
            seed,
            config_hash: output::config_hash("bounds", &resolved),
            results,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn witness(params: NoiseParams, trials: u32, seed: u64, sink: &Sink) -> Result<(), CliError> {
    let sim = noise::witness_simulation(&params, trials, seed)?;

    let resolved = json!({
        "noise": serde_json::to_value(params)?,
        "seed": seed,
        "trials": trials,
    });
    let pair_names = ["01", "02", "12"];
    let mut csv = String::from("quantity,value\n");
    csv.push_str(&format!(
        "population,{:.12e}\n",
        sim.expectations.population
    ));
    for (name, value) in pair_names.iter().zip(sim.expectations.xx.iter()) {
        csv.push_str(&format!("xx_{name},{value:.12e}\n"));
    }
    for (name, value) in pair_names.iter().zip(sim.expectations.yy.iter()) {
        csv.push_str(&format!("yy_{name},{value:.12e}\n"));
    }
    csv.push_str(&format!("fidelity,{:.12e}\n", sim.fidelity));
    csv.push_str(&format!("two_fold_rate,{:.12e}\n", sim.two_fold_rate));

    println!(
        "witness fidelity {:.6} from {} trial(s), two-fold rate {:.6e}",
        sim.fidelity, trials, sim.two_fold_rate
    );
    emit(
        sink,
        Artifact {
            kind: "witness",
            seed,
            config_hash: output::config_hash("witness", &resolved),
            results: serde_json::to_value(sim)?,
            csv: Some(csv),
            text: None,
        },
    )
}

pub fn verify(files: Vec<PathBuf>, sink: &Sink) -> Result<(), CliError> {
    let targets = if files.is_empty() {
        let mut found = Vec::new();
        let entries = fs::read_dir(&sink.dir).map_err(|e| {
            CliError::Config(format!(
                "cannot scan {}: {e}; pass files or --out",
                sink.dir.display()
            ))
        })?;
        for entry in entries {
            let path = entry?.path();
            let known = path
                .extension()
                .is_some_and(|e| e == "json" || e == "csv" || e == "txt");
            if known {
                found.push(path);
            }
        }
        found.sort();
        if found.is_empty() {
            return Err(CliError::Config(format!(
                "nothing to verify in {}",
                sink.dir.display()
            )));
        }
        found
    } else {
        files
    };

    let mut first_failure = None;
    for path in &targets {
        match output::verify_file(path) {
            Ok(()) => println!("ok {}", path.display()),
            Err(e) => {
                println!("failed {}", path.display());
                if first_failure.is_none() {
                    first_failure = Some(e);
                }
            }
        }
    }
    match first_failure {
        None => Ok(()),
        Some(e) => Err(e),
    }
}
