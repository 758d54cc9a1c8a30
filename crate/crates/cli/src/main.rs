use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use visrep::corpus::{gen_synthetic_corpus, ParallelCorpus, TaskKind};
use visrep::eval::{corpus_bleu, curves_svg, default_ps, degradation_sweep};
use visrep::harness::{self, NoiseConfig, RunConfig, SweepGrid};
use visrep::model::FrontendConfig;
use visrep::noise::{inject_corpus, NoiseKind};
use visrep::render::{pixel_stats_many, RenderConfig, Renderer};
use visrep::rng;
use visrep::segmentation::{bpe_dropout_apply, bpe_train, BpeModel, SegmentMode, Segmenter};
use visrep::slicer::{slice_image, SliceConfig};
use visrep::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(
    name = "visrep",
    version,
    about = "Render, slice, noise, segment, train and evaluate visual text models"
)]
struct Cli {
    /// Seed for all random choices; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run config (TOML). Subcommands take their defaults from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where output files go.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render each input line to a PGM image.
    Render(TextInput),
    /// Render and cut each input line into overlapping windows.
    Slice(TextInput),
    /// Inject synthetic noise into stdin lines; the report goes to stderr.
    Noise(NoiseArgs),
    /// Learn or apply BPE segmentation.
    #[command(subcommand)]
    Bpe(BpeCmd),
    /// Write a synthetic parallel corpus.
    GenCorpus(GenArgs),
    /// Train, checkpoint and sweep noise levels as described by --config.
    Train,
    /// Translate stdin lines with a checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on a parallel corpus, optionally under noise.
    Evaluate(EvalArgs),
    /// Run one training per grid point and tabulate final BLEU.
    Sweep {
        /// Grid file with `[[axis]]` tables (`name`, `values`).
        #[arg(long)]
        grid: PathBuf,
    },
    /// Mean ink density and non-white fraction of rendered stdin lines.
    PixelStats(VisualArgs),
}

#[derive(Args)]
struct VisualArgs {
    /// Font file; the built-in face when omitted.
    #[arg(long)]
    font: Option<PathBuf>,
    #[arg(long)]
    font_size: Option<u32>,
    /// Extra pixels between glyphs.
    #[arg(long)]
    padding: Option<u32>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct TextInput {
    /// Text to use instead of stdin.
    #[arg(long)]
    text: Option<String>,
    #[command(flatten)]
    visual: VisualArgs,
}

#[derive(Args)]
struct NoiseSelect {
    #[arg(long)]
    kind: Option<NoiseKind>,
    /// Built-in table (cyrillic-latin, latin-cyrillic, l33t) or a TSV path.
    #[arg(long)]
    table: Option<String>,
    /// Combining marks to draw from.
    #[arg(long)]
    marks: Option<String>,
    /// Per-character probability inside a selected token.
    #[arg(long)]
    char_p: Option<f64>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    select: NoiseSelect,
    /// Token selection probability.
    #[arg(long, default_value_t = 0.1)]
    p: f64,
}

#[derive(Subcommand)]
enum BpeCmd {
    /// Learn merges from stdin lines.
    Train {
        #[arg(long)]
        merges: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Segment stdin lines, printing tokens joined by `·`.
    Apply {
        /// BPE model file (required for bpe mode).
        #[arg(long)]
        model: Option<PathBuf>,
        /// bpe, char, word or ngram.
        #[arg(long, default_value = "bpe")]
        mode: String,
        /// BPE-dropout probability.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Print ids instead of surfaces.
        #[arg(long)]
        ids: bool,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long)]
    lexicon_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    noise: NoiseSelect,
    /// Comma-separated noise levels (default 0.0,0.1,...,1.0).
    #[arg(long, value_delimiter = ',')]
    ps: Option<Vec<f64>>,
    /// Comma-separated noise seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

struct Loaded {
    cfg: RunConfig,
    text: String,
    base: PathBuf,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<Loaded>> {
    let Some(path) = path else { return Ok(None) };
    let text = read_file(path)?;
    let cfg = RunConfig::parse(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Some(Loaded { cfg, text, base }))
}

fn stdin_lines() -> Result<Vec<String>> {
    io::stdin()
        .lock()
        .lines()
        .collect::<io::Result<_>>()
        .map_err(|e| Error::io("<stdin>", e))
}

fn out_dir(cli_dir: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn visual_settings(args: &VisualArgs, loaded: &Option<Loaded>) -> Result<(RenderConfig, SliceConfig)> {
    let (mut render, mut slice) = match loaded.as_ref().map(|l| &l.cfg.model.frontend) {
        Some(FrontendConfig::Visual { render, slice, .. }) => (render.clone(), *slice),
        _ => (RenderConfig::default(), SliceConfig::default()),
    };
    if let Some(f) = &args.font {
        render.font_path = Some(f.clone());
    }
    if let Some(s) = args.font_size {
        render.font_size = s;
    }
    if let Some(p) = args.padding {
        render.inter_char_padding = p;
    }
    if let Some(w) = args.window {
        slice.window = w;
    }
    if let Some(s) = args.stride {
        slice.stride = s;
    }
    render.validate()?;
    slice.validate()?;
    Ok((render, slice))
}

fn text_lines(input: &TextInput) -> Result<Vec<String>> {
    match &input.text {
        Some(t) => Ok(vec![t.clone()]),
        None => stdin_lines(),
    }
}

fn noise_config(sel: &NoiseSelect, loaded: &Option<Loaded>) -> Result<NoiseConfig> {
    let from_cfg = loaded.as_ref().and_then(|l| l.cfg.noise.first().cloned());
    let mut nc = match (sel.kind, from_cfg) {
        (Some(kind), _) => NoiseConfig {
            kind,
            table: None,
            marks: None,
            char_p: None,
        },
        (None, Some(nc)) => nc,
        (None, None) => return Err(Error::invalid("give --kind or a config with a [[noise]] entry")),
    };
    if sel.table.is_some() {
        nc.table = sel.table.clone();
    }
    if sel.marks.is_some() {
        nc.marks = sel.marks.clone();
    }
    if sel.char_p.is_some() {
        nc.char_p = sel.char_p;
    }
    Ok(nc)
}

fn base_dir(loaded: &Option<Loaded>) -> PathBuf {
    loaded.as_ref().map(|l| l.base.clone()).unwrap_or_default()
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::parse(e.to_string()))
}

fn execute(cli: Cli) -> Result<()> {
    let loaded = load_config(&cli.config)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let emit = |out: &mut io::StdoutLock, s: &str| writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e));

    match cli.cmd {
        Cmd::Render(input) => {
            let (render, _) = visual_settings(&input.visual, &loaded)?;
            let renderer = Renderer::from_config(&render)?;
            let dir = out_dir(&cli.out_dir)?;
            for (i, line) in text_lines(&input)?.iter().enumerate() {
                let img = renderer.render_line(line)?;
                let name = format!("line-{i:04}.pgm");
                write_file(&dir.join(&name), &img.to_pgm())?;
                emit(&mut out, &format!("{name}\t{}x{}", img.width, img.height))?;
            }
        }
        Cmd::Slice(input) => {
            let (render, slice) = visual_settings(&input.visual, &loaded)?;
            let renderer = Renderer::from_config(&render)?;
            let dir = out_dir(&cli.out_dir)?;
            for (i, line) in text_lines(&input)?.iter().enumerate() {
                let seq = slice_image(&renderer.render_line(line)?, slice);
                let sub = dir.join(format!("line-{i:04}"));
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                for j in 0..seq.len() {
                    write_file(&sub.join(format!("slice-{j:04}.pgm")), &seq.slice_to_pgm(j))?;
                }
                emit(
                    &mut out,
                    &format!("line-{i:04}\t{} slices of {}x{}", seq.len(), slice.window, seq.height),
                )?;
            }
        }
        Cmd::Noise(args) => {
            let nc = noise_config(&args.select, &loaded)?;
            let mut spec = nc.to_spec(&base_dir(&loaded))?;
            spec.p = args.p;
            spec.seed = cli.seed.unwrap_or(0);
            let (lines, report) = inject_corpus(&stdin_lines()?, &spec)?;
            for l in &lines {
                emit(&mut out, l)?;
            }
            eprintln!(
                "{}",
                serde_json::to_string(&report).map_err(|e| Error::parse(e.to_string()))?
            );
        }
        Cmd::Bpe(BpeCmd::Train { merges, model }) => {
            let merges = merges
                .or(loaded.as_ref().map(|l| l.cfg.model.target_merges))
                .unwrap_or(500);
            let lines = stdin_lines()?;
            let bpe = bpe_train(lines.iter().map(String::as_str), merges)?;
            match model {
                Some(p) => {
                    bpe.save(&p)?;
                    eprintln!("{} merges, {} symbols", bpe.merges().len(), bpe.vocab().len());
                }
                None => write!(out, "{}", bpe.to_text()).map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Cmd::Bpe(BpeCmd::Apply {
            model,
            mode,
            dropout,
            ids,
        }) => {
            let lines = stdin_lines()?;
            let mode: SegmentMode = mode.parse()?;
            let bpe = model.as_ref().map(BpeModel::load).transpose()?;
            let seg = match (mode, bpe) {
                (SegmentMode::Bpe { .. }, Some(m)) => Segmenter::Bpe(m),
                (SegmentMode::Bpe { .. }, None) => return Err(Error::invalid("bpe mode needs --model")),
                (m, _) => Segmenter::fit(m, &lines)?,
            };
            let mut rng = rng::seeded(cli.seed.unwrap_or(0));
            for line in &lines {
                let seq = match (&seg, dropout > 0.0) {
                    (Segmenter::Bpe(m), true) => bpe_dropout_apply(line, m, dropout, &mut rng),
                    _ => seg.tokens(line),
                };
                let text = if ids {
                    seq.ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
                } else {
                    seq.display()
                };
                emit(&mut out, &text)?;
            }
        }
        Cmd::GenCorpus(args) => {
            let mut spec = loaded
                .as_ref()
                .and_then(|l| l.cfg.corpus.synthetic.clone())
                .unwrap_or_default();
            if let Some(t) = args.task {
                spec.task = t;
            }
            if let Some(s) = args.size {
                spec.size = s;
            }
            if let Some(a) = args.alphabet {
                spec.alphabet = a;
            }
            if let Some(n) = args.lexicon_size {
                spec.lexicon_size = n;
            }
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let g = gen_synthetic_corpus(&spec)?;
            let dir = out_dir(&cli.out_dir)?;
            g.corpus.save(dir.join("source.txt"), dir.join("target.txt"))?;
            if !g.lexicon.is_empty() {
                let tsv: String = g.lexicon.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
                write_file(&dir.join("lexicon.tsv"), tsv.as_bytes())?;
            }
            emit(&mut out, &format!("{} pairs in {}", g.corpus.len(), dir.display()))?;
        }
        Cmd::Train => {
            let l = loaded.ok_or_else(|| Error::invalid("train needs --config"))?;
            let mut cfg = l.cfg.clone();
            let mut text = l.text.clone();
            if let Some(s) = cli.seed {
                cfg.model.seed = s;
                cfg.train.seed = s;
                text = cfg.to_toml()?;
            }
            if let Some(d) = &cli.out_dir {
                cfg.run_dir = d.clone();
            }
            let summary = harness::run(&cfg, &text, &l.base)?;
            emit(&mut out, &to_json(&summary)?)?;
        }
        Cmd::Translate { checkpoint: dir } => {
            let model = checkpoint::load(&dir)?;
            for line in stdin_lines()? {
                let t = model.translate(&line)?;
                if t.truncated {
                    eprintln!("warning: output truncated at max_len for: {line}");
                }
                emit(&mut out, &t.text)?;
            }
        }
        Cmd::Evaluate(args) => {
            let model = checkpoint::load(&args.checkpoint)?;
            let data = ParallelCorpus::load(&args.source, &args.target)?;
            let mut translate = |x: &[String]| model.translate_all(x);
            if args.noise.kind.is_none() && loaded.as_ref().is_none_or(|l| l.cfg.noise.is_empty()) {
                let score = corpus_bleu(&translate(&data.source)?, &data.target)?;
                emit(&mut out, &to_json(&score)?)?;
                return Ok(());
            }
            let nc = noise_config(&args.noise, &loaded)?;
            let spec = nc.to_spec(&base_dir(&loaded))?;
            let ps = args.ps.unwrap_or_else(default_ps);
            let id = model.config.frontend.name();
            let curve = degradation_sweep(&mut translate, &data.source, &data.target, &spec, &ps, &args.seeds, id)?;
            match &cli.out_dir {
                Some(_) => {
                    let dir = out_dir(&cli.out_dir)?;
                    let stem = format!("{id}-{}", nc.kind.name());
                    write_file(&dir.join(format!("{stem}.csv")), curve.to_csv().as_bytes())?;
                    let svg = curves_svg(&format!("{id} under {} noise", nc.kind.name()), &[&curve]);
                    write_file(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
                    emit(
                        &mut out,
                        &format!("wrote {stem}.csv and {stem}.svg to {}", dir.display()),
                    )?;
                }
                None => write!(out, "{}", curve.to_csv()).map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Cmd::Sweep { grid } => {
            let l = loaded.ok_or_else(|| Error::invalid("sweep needs --config for the base run"))?;
            let dir = cli
                .out_dir
                .clone()
                .ok_or_else(|| Error::invalid("sweep needs --out-dir"))?;
            let grid = SweepGrid::parse(&read_file(&grid)?)?;
            let mut base = l.cfg.clone();
            if let Some(s) = cli.seed {
                base.model.seed = s;
                base.train.seed = s;
            }
            let table = harness::sweep(&grid, &base, &l.base, &dir)?;
            write!(out, "{}", table.to_csv()).map_err(|e| Error::io("<stdout>", e))?;
            for r in table.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("run {:?} failed: {}", r.point, r.error.as_deref().unwrap_or(""));
            }
        }
        Cmd::PixelStats(args) => {
            let (render, _) = visual_settings(&args, &loaded)?;
            let renderer = Renderer::from_config(&render)?;
            let images = stdin_lines()?
                .iter()
                .map(|l| renderer.render_line(l))
                .collect::<Result<Vec<_>>>()?;
            let stats = pixel_stats_many(&images);
            let json = serde_json::json!({
                "lines": images.len(),
                "font": render.font_id(),
                "font_size": render.font_size,
                "avg_density": stats.avg_density,
                "nonwhite_fraction": stats.nonwhite_fraction,
            });
            emit(&mut out, &json.to_string())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // error messages already embed their causes
            eprintln!("visrep: {e}");
            ExitCode::FAILURE
        }
    }
}
