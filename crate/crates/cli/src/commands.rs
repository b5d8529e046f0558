use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use energy_field::report::{head_label, mu_k_spread, CheckCounts, HeadIdentity};
use energy_field::{
    analyze_heads, analyze_manifest, causal_energy, dwt, exit_code, fidelity_table, flatten, key_incoherence, logits,
    plotdata, synth, to_json_pretty, AggregateReport, CheckName, HeadReport, HeadTensors, Manifest, ManifestEntry,
    OutputFormat, SynthParams, SynthSpec,
};

use crate::{AnalyzeArgs, MonitorArgs, PlotdataArgs, SynthArgs, SynthSelection, VerifyArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    FieldContour,
    WaveletSpectrum,
    BridgeEndpoints,
    FidelityCurves,
    MuKVsSize,
}

impl PlotKind {
    fn name(self) -> &'static str {
        match self {
            PlotKind::FieldContour => "field_contour",
            PlotKind::WaveletSpectrum => "wavelet_spectrum",
            PlotKind::BridgeEndpoints => "bridge_endpoints",
            PlotKind::FidelityCurves => "fidelity_curves",
            PlotKind::MuKVsSize => "mu_k_vs_size",
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn check_table(reports: &[HeadReport]) -> Vec<(CheckName, CheckCounts)> {
    let mut counts: Vec<(CheckName, CheckCounts)> =
        CheckName::ALL.iter().map(|&c| (c, CheckCounts::default())).collect();
    for r in reports {
        for c in &r.checks {
            let slot = &mut counts.iter_mut().find(|(n, _)| *n == c.check).unwrap().1;
            match c.status {
                energy_field::CheckStatus::Pass => slot.pass += 1,
                energy_field::CheckStatus::Fail => slot.fail += 1,
                energy_field::CheckStatus::Skipped => slot.skipped += 1,
            }
        }
    }
    counts
}

fn print_checks(reports: &[HeadReport]) {
    for (name, c) in check_table(reports) {
        let note = if name.is_informational() {
            "  (informational)"
        } else {
            ""
        };
        println!(
            "{:<20} pass={:<6} fail={:<6} skipped={}{note}",
            name.name(),
            c.pass,
            c.fail,
            c.skipped
        );
    }
}

fn print_errors(reports: &[HeadReport]) {
    for r in reports {
        if let Some(err) = &r.error {
            eprintln!("{}: {err}", head_label(r));
        }
        for c in r.failed_checks() {
            eprintln!("{}: {} failed: {}", head_label(r), c.check.name(), c.detail);
        }
    }
}

pub fn analyze(args: AnalyzeArgs, workers: Option<usize>) -> Result<u8> {
    let mut config = args.opts.config(workers);
    config.output_dir = args.out.clone();
    config.formats = args.format.clone();
    config.inject_rowsum_bug = args.inject_rowsum_bug;
    config.validate()?;
    let manifest = Manifest::parse(&args.manifest)?;
    let reports = analyze_manifest(&manifest, &config)?;
    let aggregate = AggregateReport::from_reports(&reports, &config);

    create_dir(&args.out)?;
    if config.formats.contains(&OutputFormat::Json) {
        let heads_dir = args.out.join("heads");
        create_dir(&heads_dir)?;
        for r in &reports {
            write_file(&heads_dir.join(format!("{}.json", head_label(r))), &to_json_pretty(r)?)?;
        }
        write_file(&args.out.join("aggregate.json"), &to_json_pretty(&aggregate)?)?;
    }
    if config.formats.contains(&OutputFormat::Csv) {
        write_file(
            &args.out.join("heads.csv"),
            &plotdata::head_summary(&reports, &config.fidelity_rs),
        )?;
        write_file(
            &args.out.join("aggregate.csv"),
            &plotdata::aggregate_summary(&aggregate),
        )?;
    }

    print_errors(&reports);
    let code = exit_code(&reports);
    println!(
        "analyzed {} heads ({} failed to load); mu_K mean {:.4} +- {:.4}, {:.1}% <= {}; exit {code}",
        reports.len(),
        aggregate.failed_heads,
        aggregate.overall.mu_k_mean,
        aggregate.overall.mu_k_std,
        aggregate.overall.pct_mu_k_within_threshold,
        config.mu_k_threshold
    );
    Ok(code as u8)
}

fn synth_specs(sel: &SynthSelection) -> Result<Vec<SynthSpec>> {
    let (Some(len), Some(d_h)) = (sel.len, sel.d_h) else {
        bail!("synthetic heads need --len and --d-h");
    };
    if sel.count == 0 {
        bail!("--count must be at least 1");
    }
    let params = SynthParams {
        sink_strength: sel.sink_strength,
        concentration_factor: sel.concentration_factor,
        target_rank: sel.target_rank,
        noise_level: sel.noise_level,
        target_position: sel.target_position,
    };
    Ok((0..sel.count)
        .map(|i| SynthSpec::new(sel.kind, len, d_h, sel.seed + i).with_params(params.clone()))
        .collect())
}

/// Generates heads, numbering them as query heads of layer 0.
fn synth_heads(specs: &[SynthSpec]) -> Result<Vec<HeadTensors>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut h = synth::generate(spec).with_context(|| format!("generating seed {}", spec.seed))?;
            h.meta.query_head = i as u32;
            h.meta.kv_head = i as u32;
            Ok(h)
        })
        .collect()
}

pub fn verify(args: VerifyArgs, workers: Option<usize>) -> Result<u8> {
    let mut config = args.opts.config(workers);
    config.inject_rowsum_bug = args.inject_rowsum_bug;
    config.validate()?;
    let reports = match &args.manifest {
        Some(path) => analyze_manifest(&Manifest::parse(path)?, &config)?,
        None => analyze_heads(&synth_heads(&synth_specs(&args.synth)?)?, &config)?,
    };
    print_checks(&reports);
    print_errors(&reports);
    let code = exit_code(&reports);
    let failing = reports.iter().filter(|r| r.has_invariant_failure()).count();
    match code {
        0 => println!("verify: all checks passed on {} heads", reports.len()),
        2 => println!("verify: FAILED on {failing} of {} heads", reports.len()),
        _ => println!("verify: some heads could not be read"),
    }
    Ok(code as u8)
}

pub fn synth(args: SynthArgs) -> Result<u8> {
    let specs = synth_specs(&args.synth)?;
    let heads = synth_heads(&specs)?;
    create_dir(&args.out)?;
    let first = specs[0].seed;
    let last = specs[specs.len() - 1].seed;
    let mut manifest = Manifest::new(format!("synth-{}-seeds-{first}-{last}", args.synth.kind.name()));
    for (spec, h) in specs.iter().zip(&heads) {
        let file = format!("{}_seed{}.eft", spec.kind.name(), spec.seed);
        energy_field::write_head_dump(h, args.out.join(&file), args.dtype)?;
        manifest.push(ManifestEntry {
            dump_path: PathBuf::from(file),
            model_id: h.meta.model_id.clone(),
            layer: h.meta.layer,
            query_head: h.meta.query_head,
            kv_head: h.meta.kv_head,
            len: h.len() as u64,
            d_h: h.head_dim() as u64,
            dtype: args.dtype,
        });
    }
    let path = args.out.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {} dumps and {}", heads.len(), path.display());
    Ok(0)
}

pub fn monitor(args: MonitorArgs) -> Result<u8> {
    let input: Box<dyn BufRead> = match &args.input {
        Some(p) if p.as_os_str() != "-" => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        _ => Box::new(io::stdin().lock()),
    };
    let output: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    if !(args.mu_k_threshold.is_finite() && args.mu_k_threshold > 0.0) {
        bail!("--mu-k-threshold must be positive");
    }
    let summary = energy_field::monitor_mu_k(input, output, args.mu_k_threshold)?;
    eprintln!(
        "monitor: {} records, {} alerts, {} skipped",
        summary.records, summary.alerts, summary.skipped
    );
    Ok(0)
}

pub fn plotdata(args: PlotdataArgs, workers: Option<usize>) -> Result<u8> {
    let config = args.opts.config(workers);
    config.validate()?;
    let manifest = Manifest::parse(&args.manifest)?;
    let entry = manifest
        .heads
        .get(args.head)
        .with_context(|| format!("head {} out of range ({} heads)", args.head, manifest.heads.len()))?;
    create_dir(&args.out)?;
    let needs_head = args.which.iter().any(|&k| k != PlotKind::MuKVsSize);
    let head = if needs_head {
        Some(manifest.read_entry(entry)?)
    } else {
        None
    };
    let prefix = match &head {
        Some(h) => {
            let id = HeadIdentity::of(h);
            format!(
                "{:04}_{}_L{}_H{}",
                args.head,
                id.model_id.replace(['/', ' '], "_"),
                id.layer,
                id.query_head
            )
        }
        None => String::new(),
    };
    for &kind in &args.which {
        let csv = match (kind, &head) {
            (PlotKind::MuKVsSize, _) => mu_k_table(&manifest)?,
            (_, None) => unreachable!("head loaded for per-head plots"),
            (PlotKind::FieldContour, Some(h)) => plotdata::field_contour(&causal_energy(&logits(h)?)),
            (PlotKind::WaveletSpectrum, Some(h)) => {
                let sig = flatten(&causal_energy(&logits(h)?))?;
                plotdata::wavelet_spectrum(&dwt(&sig, config.dwt_depth)?)
            }
            (PlotKind::BridgeEndpoints, Some(h)) => plotdata::bridge_endpoints(&flatten(&causal_energy(&logits(h)?))?),
            (PlotKind::FidelityCurves, Some(h)) => plotdata::fidelity_curves(&fidelity_table(h, &config.fidelity_rs)?),
        };
        let file = if kind == PlotKind::MuKVsSize {
            format!("{}.csv", kind.name())
        } else {
            format!("{prefix}_{}.csv", kind.name())
        };
        let path = args.out.join(file);
        write_file(&path, &csv)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

/// mu_K for every readable head; unreadable heads are reported and skipped.
fn mu_k_table(manifest: &Manifest) -> Result<String> {
    let mut pairs = Vec::with_capacity(manifest.heads.len());
    for entry in &manifest.heads {
        match manifest.read_entry(entry).and_then(|h| key_incoherence(h.k())) {
            Ok(g) => pairs.push((entry.model_id.clone(), g.mu_k)),
            Err(e) => eprintln!("{}: {e}", entry.label()),
        }
    }
    Ok(plotdata::mu_k_vs_size(&mu_k_spread(pairs)))
}
