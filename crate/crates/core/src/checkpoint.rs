//! Plain-text parameter files.
//!
//! ```text
//! QCLMIX-CKPT v1
//! theta1 1 7
//! 1.2345678901234567e0 -3.0000000000000000e-1 ...
//! ...
//! END
//! ```
//!
//! Values carry 17 significant digits, which round-trips every `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

pub const MAGIC: &str = "QCLMIX-CKPT v1";

pub fn to_string(params: &ModelParams) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    for e in params.entries() {
        let _ = write!(s, "{} {}", e.name, e.tensor.rank());
        for d in e.tensor.shape() {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let mut first = true;
        for v in e.tensor.data() {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v:.16e}");
        }
        s.push('\n');
    }
    s.push_str("END\n");
    s
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(params)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    parse(&text).map_err(|detail| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    })
}

/// Parses checkpoint text; the error is a human-readable reason.
pub fn parse(text: &str) -> std::result::Result<ModelParams, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        Some((_, l)) if l.starts_with("QCLMIX-CKPT") => {
            return Err(format!("unsupported version `{}`", l.trim_end()))
        }
        _ => return Err("missing `QCLMIX-CKPT v1` header".into()),
    }
    let mut arrays: HashMap<String, Tensor> = HashMap::new();
    let mut ended = false;
    while let Some((n, line)) = lines.next() {
        let line = line.trim_end();
        if line == "END" {
            ended = true;
            break;
        }
        let mut head = line.split_whitespace();
        let name = head.next().ok_or(format!("line {}: empty header", n + 1))?;
        let ndim: usize = head
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or(format!("line {}: bad rank for `{name}`", n + 1))?;
        let shape: Vec<usize> = head
            .map(|t| t.parse().map_err(|_| format!("line {}: bad dimension `{t}`", n + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if shape.len() != ndim {
            return Err(format!(
                "line {}: `{name}` declares {ndim} dims, lists {}",
                n + 1,
                shape.len()
            ));
        }
        let (vn, vline) = lines
            .next()
            .ok_or(format!("truncated: no values for `{name}`"))?;
        let data: Vec<f64> = vline
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("line {}: bad number `{t}`", vn + 1)))
            .collect::<std::result::Result<_, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        if arrays.insert(name.to_string(), t).is_some() {
            return Err(format!("`{name}` appears twice"));
        }
    }
    if !ended {
        return Err("truncated: missing END".into());
    }

    let dim = |name: &str, axis: usize| -> std::result::Result<usize, String> {
        arrays
            .get(name)
            .and_then(|t| t.shape().get(axis).copied())
            .ok_or(format!("missing or malformed `{name}`"))
    };
    let mut cfg = ModelConfig::new(dim("theta1", 0)?, dim("centroids", 0)?);
    cfg.hidden1 = dim("fc1.bias", 0)?;
    cfg.hidden2 = dim("fc2.bias", 0)?;
    cfg.proj_hidden = dim("proj_fc1.bias", 0)?;
    cfg.embed_dim = dim("proj_fc2.bias", 0)?;
    let mut params = ModelParams::init(&cfg, &mut rng::seeded(0)).map_err(|e| e.to_string())?;
    for e in params.entries_mut() {
        let t = arrays
            .remove(e.name)
            .ok_or(format!("missing parameter `{}`", e.name))?;
        if t.shape() != e.tensor.shape() {
            return Err(format!(
                "`{}` has shape {:?}, expected {:?}",
                e.name,
                t.shape(),
                e.tensor.shape()
            ));
        }
        *e.tensor = t;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(format!("unknown parameter `{extra}`"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::infer;

    fn sample() -> ModelParams {
        let mut p = ModelParams::init_seeded(&ModelConfig::new(4, 3), 8).unwrap();
        p.bn1.running_var.data_mut()[0] = 0.1 + 0.2;
        p.fc3.bias.data_mut()[1] = -0.0;
        p.fc3.bias.data_mut()[2] = 5e-324;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let s = to_string(&p);
        let q = parse(&s).unwrap();
        for (a, b) in p.entries().iter().zip(q.entries()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.tensor), bits(b.tensor), "{}", a.name);
        }
        assert_eq!(to_string(&q), s);
    }

    #[test]
    fn files_round_trip_and_evaluate_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&p, &a).unwrap();
        let q = load(&a).unwrap();
        save(&q, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let cfg = ModelConfig::new(4, 3);
        let x = Tensor::matrix(2, 4, vec![0.1, -0.4, 2.0, 1.0, 0.0, 0.3, -1.0, 0.5]).unwrap();
        assert_eq!(infer(&p, &cfg, &x).unwrap(), infer(&q, &cfg, &x).unwrap());
    }

    #[test]
    fn malformed_files_are_errors() {
        let s = to_string(&sample());
        let cut = &s[..s.len() / 2];
        assert!(parse(cut).is_err());
        assert!(parse("QCLMIX-CKPT v2\nEND\n").unwrap_err().contains("version"));
        assert!(parse("hello\n").is_err());
        let bad = s.replacen("theta1 1 4", "theta1 1 5", 1);
        assert!(parse(&bad).is_err());
        let missing = s.replacen("centroids", "centroidz", 1);
        assert!(parse(&missing).is_err());
        assert!(matches!(load("/nonexistent/x.ckpt"), Err(Error::Checkpoint { .. })));
    }
}
