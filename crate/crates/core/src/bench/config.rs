use std::collections::BTreeMap;
use std::str::FromStr;

use super::{calibrate_profile, BenchError, BenchMode, PlatformProfile, StreamSpec, DEFAULT_SWEEP};
use crate::net::{parse_ipv4, Endpoint};

/// Settings for a `bench` run, read from a flat `key = value` file.
///
/// Recognised keys: `mode`, `client`, `server`, `segment_bytes`,
/// `window_bytes`, `total_bytes`, `path`, `rules` (comma separated), `seed`,
/// `trials`, `platform`, `cpu_mhz`, `power_watts`, and either
/// `base_cost` + `per_rule_cost` or `t0_mbps` + `tn_mbps` + `calib_rules`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub stream: StreamSpec,
    pub rule_counts: Vec<u64>,
    pub seed: u64,
    pub trials: usize,
    pub profile: PlatformProfile,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Model,
            stream: StreamSpec::default(),
            rule_counts: DEFAULT_SWEEP.to_vec(),
            seed: 1,
            trials: super::DEFAULT_TRIALS,
            profile: PlatformProfile::rpi(),
        }
    }
}

fn parse_endpoint(text: &str) -> Result<Endpoint, String> {
    let (a, p) = text.rsplit_once(':').ok_or_else(|| format!("expected addr:port, got `{text}`"))?;
    let addr = parse_ipv4(a).map_err(|e| e.to_string())?;
    let port = p.parse::<u16>().map_err(|_| format!("bad port `{p}`"))?;
    Ok(Endpoint::new(addr, port))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

pub fn parse_bench_config(text: &str) -> Result<BenchConfig, BenchError> {
    let mut cfg = BenchConfig::default();
    let mut profile_keys: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let err = |message: String| BenchError::Config { line: line_no, message };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let s = &mut cfg.stream;
        let r: Result<(), String> = match key {
            "mode" => value.parse().map(|m| cfg.mode = m),
            "client" => parse_endpoint(value).map(|e| s.client = e),
            "server" => parse_endpoint(value).map(|e| s.server = e),
            "segment_bytes" => num(key, value).map(|v| s.segment_bytes = v),
            "window_bytes" => num(key, value).map(|v| s.window_bytes = v),
            "total_bytes" => num(key, value).map(|v| s.total_bytes = v),
            "path" => value.parse().map(|p| s.path = p),
            "seed" => num(key, value).map(|v| cfg.seed = v),
            "trials" => num(key, value).map(|v| cfg.trials = v),
            "rules" => value
                .split(',')
                .map(|t| num::<u64>(key, t.trim()))
                .collect::<Result<Vec<_>, _>>()
                .map(|v| cfg.rule_counts = v),
            "platform" | "cpu_mhz" | "power_watts" | "base_cost" | "per_rule_cost" | "t0_mbps" | "tn_mbps"
            | "calib_rules" => {
                profile_keys.insert(key, (line_no, value));
                Ok(())
            }
            other => Err(format!("unknown key `{other}`")),
        };
        r.map_err(err)?;
    }

    cfg.stream.validate().map_err(|m| BenchError::Config { line: last_line, message: m })?;
    if cfg.trials == 0 {
        return Err(BenchError::NoTrials);
    }
    super::check_sweep(&cfg.rule_counts)?;
    cfg.profile = build_profile(&profile_keys)?;
    Ok(cfg)
}

fn build_profile(keys: &BTreeMap<&str, (usize, &str)>) -> Result<PlatformProfile, BenchError> {
    let get = |k: &str| -> Result<Option<f64>, BenchError> {
        keys.get(k)
            .map(|(line, v)| num::<f64>(k, v).map_err(|message| BenchError::Config { line: *line, message }))
            .transpose()
    };
    let name = keys.get("platform").map(|(_, v)| v.to_string());
    let mut base = match &name {
        Some(n) => PlatformProfile::preset(n).unwrap_or(PlatformProfile {
            name: n.clone(),
            cpu_mhz: 0.0,
            base_cost: 0.0,
            per_rule_cost: 0.0,
            power_watts: 0.0,
        }),
        None => PlatformProfile::rpi(),
    };
    if let Some(v) = get("cpu_mhz")? {
        base.cpu_mhz = v;
    }
    if let Some(v) = get("power_watts")? {
        base.power_watts = v;
    }
    match (get("t0_mbps")?, get("tn_mbps")?, get("calib_rules")?) {
        (Some(t0), Some(tn), Some(n)) => {
            return calibrate_profile(&base.name, base.cpu_mhz, t0, tn, n as u64, base.power_watts);
        }
        (None, None, None) => {}
        _ => {
            return Err(BenchError::Calibration("t0_mbps, tn_mbps and calib_rules must be given together".into()))
        }
    }
    if let Some(v) = get("base_cost")? {
        base.base_cost = v;
    }
    if let Some(v) = get("per_rule_cost")? {
        base.per_rule_cost = v;
    }
    base.validate()?;
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::BenchPath;

    #[test]
    fn defaults_from_empty_file() {
        let c = parse_bench_config("# nothing\n\n").unwrap();
        assert_eq!(c, BenchConfig::default());
    }

    #[test]
    fn full_file() {
        let c = parse_bench_config(
            "mode = native\nclient=10.1.1.1:1234\nserver = 10.2.2.2:80\ntotal_bytes=3000\n\
             path=input\nrules=0, 10,20\nseed=9\ntrials=5\nplatform=cubieboard\n",
        )
        .unwrap();
        assert_eq!(c.mode, BenchMode::Native);
        assert_eq!(c.stream.server.port, 80);
        assert_eq!(c.stream.path, BenchPath::Input);
        assert_eq!(c.rule_counts, vec![0, 10, 20]);
        assert_eq!((c.seed, c.trials), (9, 5));
        assert_eq!(c.profile, PlatformProfile::cubieboard());
    }

    #[test]
    fn calibrated_custom_profile() {
        let c = parse_bench_config("platform=box\ncpu_mhz=1200\npower_watts=2\nt0_mbps=100\ntn_mbps=50\ncalib_rules=100\n")
            .unwrap();
        assert_eq!(c.profile.name, "box");
        assert!((c.profile.per_rule_cost - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_line() {
        match parse_bench_config("seed=1\nbogus=2\n") {
            Err(BenchError::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_bench_config("window_bytes=10\n").is_err());
        assert!(parse_bench_config("rules=5,1\n").is_err());
        assert!(parse_bench_config("platform=unknown\n").is_err());
    }
}
