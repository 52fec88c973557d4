//! Run configuration files.
//!
//! INI-style text: `[section]` headers, `key = value` lines, `#` or `;`
//! comments. Sections are `objective`, `workers`, `bandwidth`, `kimad`,
//! `ef21` and `run`. Every key is optional; unknown sections, unknown keys and
//! repeated keys are errors naming the line.
//!
//! In `[bandwidth]` the trace keys describe both links; a `downlink_` prefix
//! (`downlink_kind`, `downlink_eta`, ...) overrides them for the downlink.

use std::collections::BTreeMap;
use std::path::Path;

use crate::allocator::default_ratio_grid;
use crate::bandwidth::BandwidthTrace;
use crate::compressors::CompressorKind;
use crate::error::{Error, Result};
use crate::objectives::LsqSpec;
use crate::simulator::{
    DownlinkMode, EstimatorMode, LinkSpec, ObjectiveSpec, Prior, SimConfig, StepSize, TComp, UHatInit,
};

const TRACE_KEYS: &[&str] = &[
    "kind", "eta", "theta", "delta", "noise_std", "noise_dt", "low", "high", "period", "rate", "file",
];

fn allowed(section: &str, key: &str) -> bool {
    let keys: &[&str] = match section {
        "objective" => &[
            "kind",
            "layer_sizes",
            "a_min",
            "a_max",
            "samples",
            "batch_size",
            "scale_min",
            "scale_max",
            "noise_std",
            "x0_scale",
        ],
        "workers" => &["count", "weights"],
        "bandwidth" => {
            let base = key.strip_prefix("downlink_").unwrap_or(key);
            return TRACE_KEYS.contains(&base)
                || ["estimator", "ewma_lambda", "prior", "avg_window", "downlink_mode"].contains(&key);
        }
        "kimad" => &["t_budget", "t_comp", "alpha", "ratio_grid", "discretization", "value_bits"],
        "ef21" => &["compressor", "k", "step_size", "u_hat_init", "warmup_rounds"],
        "run" => &["mode", "rounds", "seed", "time_horizon"],
        _ => &[],
    };
    keys.contains(&key)
}

const SECTIONS: [&str; 6] = ["objective", "workers", "bandwidth", "kimad", "ef21", "run"];

/// A value together with the line it came from.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

type Sections = BTreeMap<String, BTreeMap<String, Entry>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::input(line, format!("malformed section header '{content}'")))?
                .trim()
                .to_ascii_lowercase();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::input(line, format!("unknown section [{name}]")));
            }
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::input(line, format!("expected key = value, found '{content}'")))?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        let section = current
            .as_ref()
            .ok_or_else(|| Error::input(line, format!("key '{key}' outside any section")))?;
        if key.is_empty() {
            return Err(Error::input(line, "empty key"));
        }
        if !allowed(section, &key) {
            return Err(Error::input(line, format!("unknown key '{key}' in [{section}]")));
        }
        let keys = out.get_mut(section).expect("section inserted");
        if let Some(prev) = keys.get(&key) {
            return Err(Error::input(
                line,
                format!("duplicate key '{key}' (first set on line {})", prev.line),
            ));
        }
        keys.insert(key, Entry { value, line });
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let trimmed = line.trim_start();
    if trimmed.starts_with('#') || trimmed.starts_with(';') {
        return "";
    }
    // inline comments need leading whitespace so values like "a#b" survive
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(i) => &line[..i],
        None => line,
    }
}

struct Reader<'a> {
    sections: &'a Sections,
    section: &'static str,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&Entry> {
        self.sections.get(self.section).and_then(|s| s.get(key))
    }

    fn bad(&self, e: &Entry, key: &str, what: &str) -> Error {
        Error::input(
            e.line,
            format!("[{}] {key} = '{}': expected {what}", self.section, e.value),
        )
    }

    fn str(&self, key: &str) -> Option<(String, usize)> {
        self.raw(key).map(|e| (e.value.to_ascii_lowercase(), e.line))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key)
            .map(|e| {
                e.value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.bad(e, key, "a finite number"))
            })
            .transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.raw(key)
            .map(|e| e.value.parse::<usize>().map_err(|_| self.bad(e, key, "a non-negative integer")))
            .transpose()
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.raw(key)
            .map(|e| e.value.parse::<u64>().map_err(|_| self.bad(e, key, "a non-negative integer")))
            .transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|e| {
                e.value
                    .split(',')
                    .map(|s| s.trim().parse::<T>().map_err(|_| self.bad(e, key, what)))
                    .collect::<Result<Vec<T>>>()
            })
            .transpose()
    }

    /// A value that is either a keyword or a number.
    fn keyword_or_f64(&self, key: &str, keyword: &str) -> Result<Option<Option<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(e) if e.value.eq_ignore_ascii_case(keyword) => Ok(Some(None)),
            Some(_) => Ok(Some(self.f64(key)?)),
        }
    }
}

fn at<'a>(sections: &'a Sections, section: &'static str) -> Reader<'a> {
    Reader { sections, section }
}

fn trace_from(r: &Reader, prefix: &str, base: Option<&LinkSpec>, dir: &Path) -> Result<Option<LinkSpec>> {
    let key = |k: &str| format!("{prefix}{k}");
    let any = TRACE_KEYS.iter().any(|k| r.raw(&key(k)).is_some());
    if !any {
        return Ok(None);
    }
    let kind = match r.str(&key("kind")) {
        Some((k, _)) => k,
        None => match base {
            Some(LinkSpec::Trace(BandwidthTrace::Sinusoidal { .. })) | None => "sinusoidal".into(),
            Some(LinkSpec::Trace(BandwidthTrace::TwoLevel { .. })) => "two_level".into(),
            Some(LinkSpec::Trace(BandwidthTrace::Constant(_))) => "constant".into(),
            Some(LinkSpec::Trace(BandwidthTrace::Samples(_))) | Some(LinkSpec::File(_)) => "file".into(),
        },
    };
    // unset keys fall back to the base link, then to the built-in defaults
    let (d_eta, d_theta, d_delta, d_std, d_dt) = match base {
        Some(LinkSpec::Trace(BandwidthTrace::Sinusoidal { eta, theta, delta, noise_std, noise_dt, .. })) => {
            (*eta, *theta, *delta, *noise_std, *noise_dt)
        }
        _ => (300e6, 1.0, 30e6, 0.0, 1.0),
    };
    let (d_low, d_high, d_period) = match base {
        Some(LinkSpec::Trace(BandwidthTrace::TwoLevel { low, high, period })) => (*low, *high, *period),
        _ => (30e6, 330e6, 10.0),
    };
    let d_rate = match base {
        Some(LinkSpec::Trace(BandwidthTrace::Constant(b))) => *b,
        _ => 100e6,
    };
    let f = |k: &str, d: f64| -> Result<f64> { Ok(r.f64(&key(k))?.unwrap_or(d)) };
    let line = r.raw(&key("kind")).map_or(0, |e| e.line);
    let spec = match kind.as_str() {
        "sinusoidal" => LinkSpec::Trace(BandwidthTrace::Sinusoidal {
            eta: f("eta", d_eta)?,
            theta: f("theta", d_theta)?,
            delta: f("delta", d_delta)?,
            noise_std: f("noise_std", d_std)?,
            noise_dt: f("noise_dt", d_dt)?,
            seed: 0,
        }),
        "two_level" | "twolevel" => LinkSpec::Trace(BandwidthTrace::TwoLevel {
            low: f("low", d_low)?,
            high: f("high", d_high)?,
            period: f("period", d_period)?,
        }),
        "constant" => LinkSpec::Trace(BandwidthTrace::Constant(f("rate", d_rate)?)),
        "file" => {
            let path = match (r.raw(&key("file")), base) {
                (Some(e), _) => dir.join(&e.value),
                (None, Some(LinkSpec::File(p))) => p.clone(),
                _ => return Err(Error::input(line, format!("{prefix}kind = file needs {prefix}file"))),
            };
            LinkSpec::File(path)
        }
        other => {
            return Err(Error::input(
                line,
                format!("unknown trace kind '{other}' (sinusoidal, two_level, constant, file)"),
            ))
        }
    };
    if let LinkSpec::Trace(t) = &spec {
        t.clone()
            .validated()
            .map_err(|e| Error::input(line, e.to_string()))?;
    }
    Ok(Some(spec))
}

/// Parses config text. Relative trace file paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<SimConfig> {
    let s = parse_sections(text)?;
    let mut c = SimConfig::default();

    let r = at(&s, "run");
    if let Some((m, line)) = r.str("mode") {
        c.mode = m.parse().map_err(|e: Error| Error::input(line, e.to_string()))?;
    }
    c.rounds = r.usize("rounds")?.unwrap_or(c.rounds);
    c.seed = r.u64("seed")?.unwrap_or(c.seed);
    c.time_horizon_s = r.f64("time_horizon")?.or(c.time_horizon_s);

    let r = at(&s, "workers");
    c.workers = r.usize("count")?.unwrap_or(c.workers);
    c.weights = r.list("weights", "a comma-separated list of numbers")?.unwrap_or_default();

    let r = at(&s, "objective");
    let kind = r.str("kind").unwrap_or(("quadratic".into(), 0));
    let sizes: Option<Vec<usize>> = r.list("layer_sizes", "a comma-separated list of layer sizes")?;
    c.objective = match kind.0.as_str() {
        "quadratic" => {
            for k in ["samples", "batch_size", "scale_min", "scale_max", "noise_std"] {
                if let Some(e) = r.raw(k) {
                    return Err(Error::input(e.line, format!("'{k}' applies to kind = lsq only")));
                }
            }
            ObjectiveSpec::Quadratic {
                layer_sizes: sizes.unwrap_or_else(|| vec![30]),
                a_min: r.f64("a_min")?.unwrap_or(1.0),
                a_max: r.f64("a_max")?.unwrap_or(100.0),
            }
        }
        "lsq" => {
            for k in ["a_min", "a_max"] {
                if let Some(e) = r.raw(k) {
                    return Err(Error::input(e.line, format!("'{k}' applies to kind = quadratic only")));
                }
            }
            let d = LsqSpec::default();
            ObjectiveSpec::Lsq(LsqSpec {
                layer_sizes: sizes.unwrap_or(d.layer_sizes),
                samples: r.usize("samples")?.unwrap_or(d.samples),
                batch_size: r.usize("batch_size")?.unwrap_or(d.batch_size),
                scale_range: (
                    r.f64("scale_min")?.unwrap_or(d.scale_range.0),
                    r.f64("scale_max")?.unwrap_or(d.scale_range.1),
                ),
                noise_std: r.f64("noise_std")?.unwrap_or(d.noise_std),
            })
        }
        other => return Err(Error::input(kind.1, format!("unknown objective kind '{other}' (quadratic, lsq)"))),
    };
    c.x0_scale = r.f64("x0_scale")?.unwrap_or(c.x0_scale);

    let r = at(&s, "bandwidth");
    if let Some(up) = trace_from(&r, "", None, base_dir)? {
        c.uplink = up;
    }
    c.downlink = trace_from(&r, "downlink_", Some(&c.uplink), base_dir)?.unwrap_or_else(|| c.uplink.clone());
    if let Some((e, line)) = r.str("estimator") {
        c.estimator = match e.as_str() {
            "ewma" => EstimatorMode::Ewma,
            "oracle" => EstimatorMode::Oracle,
            other => return Err(Error::input(line, format!("unknown estimator '{other}' (ewma, oracle)"))),
        };
    }
    c.ewma_lambda = r.f64("ewma_lambda")?.unwrap_or(c.ewma_lambda);
    if let Some(p) = r.keyword_or_f64("prior", "auto")? {
        c.prior = p.map_or(Prior::Auto, Prior::Value);
    }
    c.avg_window_s = r.f64("avg_window")?.unwrap_or(c.avg_window_s);
    if let Some((m, line)) = r.str("downlink_mode") {
        c.downlink_mode = match m.as_str() {
            "ideal" => DownlinkMode::Ideal,
            "compressed" => DownlinkMode::Compressed,
            other => return Err(Error::input(line, format!("unknown downlink_mode '{other}' (ideal, compressed)"))),
        };
    }

    let r = at(&s, "kimad");
    c.t_budget_s = r.f64("t_budget")?.unwrap_or(c.t_budget_s);
    if let Some(t) = r.keyword_or_f64("t_comp", "auto")? {
        c.t_comp = t.map_or(TComp::Auto, TComp::Seconds);
    }
    c.alpha_down = r.f64("alpha")?.unwrap_or(c.alpha_down);
    if let Some(e) = r.raw("ratio_grid") {
        c.ratio_grid = if e.value.eq_ignore_ascii_case("default") {
            default_ratio_grid()
        } else {
            r.list("ratio_grid", "'default' or a comma-separated list of ratios")?
                .unwrap_or_default()
        };
    }
    c.discretization = r.usize("discretization")?.unwrap_or(c.discretization);
    if let Some(e) = r.raw("value_bits") {
        c.value_bits = e
            .value
            .parse()
            .map_err(|_| Error::input(e.line, format!("value_bits = '{}': expected an integer", e.value)))?;
    }

    let r = at(&s, "ef21");
    if let Some((k, line)) = r.str("compressor") {
        c.compressor = match k.as_str() {
            "topk" => CompressorKind::TopK,
            "randk" => CompressorKind::RandK,
            other => return Err(Error::input(line, format!("unknown compressor '{other}' (topk, randk)"))),
        };
    }
    c.fixed_k = r.usize("k")?.unwrap_or(c.fixed_k);
    if let Some(e) = r.raw("step_size") {
        c.step_size = match e.value.to_ascii_lowercase().as_str() {
            "theory" => StepSize::Theory,
            "theory_adaptive" | "adaptive" => StepSize::TheoryAdaptive,
            _ => StepSize::Constant(r.f64("step_size")?.expect("present")),
        };
    }
    if let Some((u, line)) = r.str("u_hat_init") {
        c.u_hat_init = match u.as_str() {
            "zero" => UHatInit::Zero,
            "gradient" => UHatInit::Gradient,
            other => return Err(Error::input(line, format!("unknown u_hat_init '{other}' (zero, gradient)"))),
        };
    }
    c.warmup_rounds = r.usize("warmup_rounds")?.unwrap_or(c.warmup_rounds);

    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &dir)
}
