//! Plain-text `key = value` configuration files for the dgp and simulate
//! subcommands.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use mdjive::DgpConfig;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", lineno + 1);
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_pair(value: &str, key: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [one] => {
            let v = one.parse().with_context(|| format!("{key}: bad number `{one}`"))?;
            Ok([v, v])
        }
        [a, b] => Ok([
            a.parse().with_context(|| format!("{key}: bad number `{a}`"))?,
            b.parse().with_context(|| format!("{key}: bad number `{b}`"))?,
        ]),
        _ => bail!("{key}: expected one value or a pair"),
    }
}

fn parse_pair_usize(value: &str, key: &str) -> Result<[usize; 2]> {
    let p = parse_pair(value, key)?;
    Ok([p[0] as usize, p[1] as usize])
}

/// DGP configuration from a key=value file; unspecified keys keep their
/// defaults (n=500, judges=30, clusters=30,30, gamma=2, omega=0,0, rho=0.5,
/// weights=1/3,1/3, beta=0, factor_variance=9, ridge=0.01).
pub fn dgp_config(text: &str) -> Result<DgpConfig> {
    let map = parse_kv(text)?;
    let mut config = DgpConfig::default();
    for (key, value) in &map {
        match key.as_str() {
            "n" => config.n = value.parse().context("n")?,
            "judges" | "k" => config.judges = value.parse().context("judges")?,
            "clusters" => config.clusters = parse_pair_usize(value, "clusters")?,
            "gamma" => config.gamma = parse_pair(value, "gamma")?,
            "gamma_judges" => config.gamma_judges = value.parse().context("gamma_judges")?,
            "omega" => config.omega = parse_pair(value, "omega")?,
            "rho" => config.rho = value.parse().context("rho")?,
            "weights" => config.weights = parse_pair(value, "weights")?,
            "beta" => config.beta = value.parse().context("beta")?,
            "factor_variance" => {
                config.factor_variance = value.parse().context("factor_variance")?
            }
            "ridge" => config.ridge = value.parse().context("ridge")?,
            "reps" | "replications" => {
                config.replications = value.parse().context("replications")?
            }
            "seed" => config.seed = value.parse().context("seed")?,
            other => bail!("unknown config key `{other}`"),
        }
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_defaults() {
        let cfg = dgp_config("n = 100\nomega = 0,1\nseed = 5\n# comment\n").unwrap();
        assert_eq!(cfg.n, 100);
        assert_eq!(cfg.omega, [0.0, 1.0]);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.judges, 30);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(dgp_config("nn = 3").is_err());
    }
}
