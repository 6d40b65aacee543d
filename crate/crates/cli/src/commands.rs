use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nspp::checkpoint::Checkpoint;
use nspp::griffinlim::{griffin_lim, reconstruct, GlConfig, GlInit};
use nspp::io::{read_phsc, read_wav, write_phsc, write_wav};
use nspp::metrics::{f0_rmse, snr, EvalReport, UtteranceReport};
use nspp::spectral::{
    amplitude, log_amplitude, phase_of, stft, AmplitudeSpectrogram, PhaseSpectrogram, StftConfig,
    LOG_AMPLITUDE_FLOOR,
};
use nspp::trainer::{list_wavs, ExperimentConfig, Trainer};

use crate::{Cli, Command, EvalArgs, ExtractArgs, GlArgs, PredictArgs, ReconstructArgs, TrainArgs};

pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs or invalid configuration (exit 2).
    Usage(String),
    /// Anything that went wrong while doing the work (exit 1).
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<nspp::Error> for CliError {
    fn from(e: nspp::Error) -> Self {
        match e {
            nspp::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    match cli.command {
        Command::Extract(a) => pool.install(|| extract(a)),
        Command::Train(a) => train(a, cli.seed),
        Command::Predict(a) => predict(a),
        Command::Gl(a) => pool.install(|| gl(a, cli.seed.unwrap_or(0))),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Eval(a) => pool.install(|| eval(a)),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", path.display())));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn stft_config(path: Option<&Path>) -> Result<StftConfig> {
    match path {
        Some(p) => Ok(load_config(p)?.stft),
        None => Ok(StftConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let files = list_wavs(dir)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no input files in {}", dir.display())));
    }
    Ok(files)
}

/// Runs `f` over `items` on the current pool, logs each failure and fails
/// overall if any item failed.
fn for_each_file<T: Sync>(items: &[T], label: impl Fn(&T) -> String + Sync, f: impl Fn(&T) -> Result<()> + Sync) -> Result<()> {
    let failed = items
        .par_iter()
        .map(|item| match f(item) {
            Ok(()) => 0,
            Err(e) => {
                error!("{}: {e}", label(item));
                1
            }
        })
        .sum::<usize>();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} files failed", items.len())));
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let cfg = stft_config(a.config.as_deref())?;
    let files = wav_files(&a.input)?;
    create_dir(&a.out)?;
    for_each_file(
        &files,
        |p| p.display().to_string(),
        |path| {
            let wave = read_wav(path, cfg.sample_rate)?;
            let spec = stft(&wave, &cfg)?;
            let stem = stem(path);
            write_phsc(a.out.join(format!("{stem}.amp.phsc")), amplitude(&spec).values())?;
            write_phsc(a.out.join(format!("{stem}.phase.phsc")), phase_of(&spec).values())?;
            Ok(())
        },
    )?;
    info!("extracted {} files into {}", files.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(cfg, &a.out, ck)?,
        None => Trainer::new(cfg, &a.out)?,
    };
    let summary = trainer.run()?;
    let (first, last) = (summary.steps.first(), summary.steps.last());
    if let (Some(f), Some(l)) = (first, last) {
        info!("loss {:.4} -> {:.4} over {} steps", f.total, l.total, summary.steps.len());
    }
    info!("final checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

/// A spectral input: a WAV to analyze, or a stored amplitude spectrogram.
#[derive(Debug, Clone)]
enum Input {
    Wav(PathBuf),
    Amplitude(PathBuf),
}

impl Input {
    fn path(&self) -> &Path {
        match self {
            Input::Wav(p) | Input::Amplitude(p) => p,
        }
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".amp.phsc", ".phsc", ".wav", ".WAV"] {
        if let Some(s) = name.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    name
}

fn classify(path: &Path) -> Option<Input> {
    let ext = path.extension()?.to_string_lossy().to_ascii_lowercase();
    match ext.as_str() {
        "wav" => Some(Input::Wav(path.to_path_buf())),
        "phsc" => Some(Input::Amplitude(path.to_path_buf())),
        _ => None,
    }
}

/// WAVs and `*.amp.phsc` files in a directory, or a single file.
fn collect_inputs(path: &Path) -> Result<Vec<Input>> {
    let inputs: Vec<Input> = if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        entries
            .iter()
            .filter_map(|p| classify(p))
            .filter(|i| match i {
                Input::Wav(_) => true,
                Input::Amplitude(p) => p.to_string_lossy().ends_with(".amp.phsc"),
            })
            .collect()
    } else if path.is_file() {
        let input = classify(path).ok_or_else(|| {
            CliError::Usage(format!("{}: expected a .wav or .phsc file", path.display()))
        })?;
        vec![input]
    } else {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    };
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no input files in {}", path.display())));
    }
    Ok(inputs)
}

/// Amplitude spectrogram and output length for one input.
fn load_amplitude(input: &Input, cfg: &StftConfig, length: Option<usize>) -> Result<(AmplitudeSpectrogram, usize)> {
    match input {
        Input::Wav(p) => {
            let wave = read_wav(p, cfg.sample_rate)?;
            Ok((amplitude(&stft(&wave, cfg)?), wave.len()))
        }
        Input::Amplitude(p) => {
            let length = length.ok_or_else(|| {
                CliError::Usage(format!("{}: --length is required for PHSC input", p.display()))
            })?;
            let amp = AmplitudeSpectrogram::new(read_phsc(p)?)?;
            if cfg.frame_count(length) != amp.dim().0 {
                return Err(CliError::Usage(format!(
                    "{}: --length {length} implies {} frames, file has {}",
                    p.display(),
                    cfg.frame_count(length),
                    amp.dim().0
                )));
            }
            Ok((amp, length))
        }
    }
}

fn check_length_flag(inputs: &[Input], length: Option<usize>) -> Result<()> {
    if length.is_none() && inputs.iter().any(|i| matches!(i, Input::Amplitude(_))) {
        return Err(CliError::Usage("--length is required for PHSC input".into()));
    }
    Ok(())
}

/// Per-utterance generation times written by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub utterances: BTreeMap<String, UtteranceTiming>,
    pub total_generation_s: f64,
    pub total_duration_s: f64,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceTiming {
    pub duration_s: f64,
    pub generation_s: f64,
}

/// Runs on the calling thread only so the timings reflect one core.
fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = ck.header.stft.clone().unwrap_or_default();
    let model = ck.into_model()?;
    let inputs = collect_inputs(&a.input)?;
    check_length_flag(&inputs, a.length)?;
    create_dir(&a.out)?;

    let mut timing = Timing {
        utterances: BTreeMap::new(),
        total_generation_s: 0.0,
        total_duration_s: 0.0,
        rtf: 0.0,
    };
    for input in &inputs {
        let (amp, length) = load_amplitude(input, &cfg, a.length)?;
        let name = stem(input.path());
        let start = Instant::now();
        let log_amp = log_amplitude(&amp, LOG_AMPLITUDE_FLOOR)?;
        let phase = model.predict_phase(log_amp.view())?;
        let wave = reconstruct(&amp, &phase, &cfg, length)?;
        let seconds = start.elapsed().as_secs_f64();
        write_phsc(a.out.join(format!("{name}.phase.phsc")), phase.values())?;
        write_wav(a.out.join(format!("{name}.wav")), &wave)?;
        let duration = wave.duration_secs();
        info!("{name}: {duration:.3} s of audio in {seconds:.3} s");
        timing.total_generation_s += seconds;
        timing.total_duration_s += duration;
        timing.utterances.insert(
            name,
            UtteranceTiming {
                duration_s: duration,
                generation_s: seconds,
            },
        );
    }
    timing.rtf = nspp::metrics::rtf(timing.total_generation_s, timing.total_duration_s)?;
    info!(
        "RTF {:.4} ({:.1}x real time) over {} files",
        timing.rtf,
        1.0 / timing.rtf.max(1e-12),
        inputs.len()
    );
    let text = serde_json::to_string_pretty(&timing).expect("timing serializes");
    write_text(&a.out.join(TIMING_FILE), &text)
}

fn gl(a: GlArgs, seed: u64) -> Result<()> {
    let cfg = stft_config(a.config.as_deref())?;
    let inputs = collect_inputs(&a.input)?;
    check_length_flag(&inputs, a.length)?;
    create_dir(&a.out)?;
    for_each_file(
        &inputs,
        |i| i.path().display().to_string(),
        |input| {
            let (amp, length) = load_amplitude(input, &cfg, a.length)?;
            let gl_cfg = GlConfig {
                iterations: a.iters,
                init: if a.random_init { GlInit::Random { seed } } else { GlInit::Zero },
                signal_length: Some(length),
            };
            let phase = griffin_lim(&amp, &gl_cfg, &cfg)?;
            let wave = reconstruct(&amp, &phase, &cfg, length)?;
            write_wav(a.out.join(format!("{}.wav", stem(input.path()))), &wave)?;
            Ok(())
        },
    )?;
    info!("{} Griffin-Lim reconstructions ({} iterations)", inputs.len(), a.iters);
    Ok(())
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let cfg = stft_config(a.config.as_deref())?;
    let amp = AmplitudeSpectrogram::new(read_phsc(&a.amp)?)?;
    let phase = PhaseSpectrogram::wrapped(read_phsc(&a.phase)?);
    if cfg.frame_count(a.length) != amp.dim().0 {
        return Err(CliError::Usage(format!(
            "--length {} implies {} frames, spectrogram has {}",
            a.length,
            cfg.frame_count(a.length),
            amp.dim().0
        )));
    }
    let wave = reconstruct(&amp, &phase, &cfg, a.length)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_wav(&a.out, &wave)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let refs = wav_files(&a.reference)?;
    let tests = wav_files(&a.test)?;
    let names = |v: &[PathBuf]| -> Vec<String> {
        v.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
    };
    let (ref_names, test_names) = (names(&refs), names(&tests));
    let missing: Vec<String> = ref_names
        .iter()
        .filter(|n| !test_names.contains(n))
        .map(|n| format!("{n} (no test file)"))
        .chain(
            test_names
                .iter()
                .filter(|n| !ref_names.contains(n))
                .map(|n| format!("{n} (no reference file)")),
        )
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Failed(format!("unpaired files: {}", missing.join(", "))));
    }
    let timing: Option<Timing> = match &a.timing {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };

    let rows = ref_names
        .par_iter()
        .map(|name| -> Result<UtteranceReport> {
            let reference = read_wav(a.reference.join(name), a.sample_rate)?;
            let test = read_wav(a.test.join(name), a.sample_rate)?;
            let f0 = match f0_rmse(&reference, &test) {
                Ok(v) => Some(v),
                Err(nspp::Error::Undefined(what)) => {
                    warn!("{name}: {what} is undefined");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            let stem = stem(Path::new(name));
            let generation_s = match &timing {
                Some(t) => Some(
                    t.utterances
                        .get(&stem)
                        .ok_or_else(|| CliError::Failed(format!("timing file has no entry for {stem}")))?
                        .generation_s,
                ),
                None => None,
            };
            Ok(UtteranceReport {
                name: stem,
                snr_db: snr(&reference, &test)?,
                f0_rmse_cents: f0,
                duration_s: reference.duration_secs(),
                generation_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_utterances(a.system, rows)?;
    write_text(&a.out, &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}
