//! Versioned text checkpoints.
//!
//! ```text
//! tcemnet-checkpoint 1
//! <key> = <value>            metadata, sorted by key
//! ---
//! tensor <name> <rows> <cols>
//! <row values, space separated>
//! ```
//!
//! Values are written in shortest round-trip exponent form, so
//! save → load → save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::NormStats;
use crate::kv::KvMap;
use crate::model::{ModelConfig, TcemParams};
use crate::nn::Matrix;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "tcemnet-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: TcemParams,
    /// Free-form metadata (training config, seeds, ...). Keys must not
    /// start with `model.` or `data.`.
    pub meta: KvMap,
    pub feature_names: Vec<String>,
    pub label_vocab: Vec<String>,
    pub norm: Option<NormStats>,
}

fn join_names(names: &[String]) -> Result<String> {
    if let Some(n) = names.iter().find(|n| n.contains(['\t', '\n', '\r'])) {
        return Err(Error::Argument(format!(
            "name `{n}` contains a tab or newline"
        )));
    }
    Ok(names.join("\t"))
}

fn split_names(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split('\t').map(str::to_string).collect()
    }
}

fn write_tensor(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn render(&self) -> Result<String> {
        let mut kv = KvMap::new();
        for (k, v) in self.meta.iter() {
            if k.starts_with("model.") || k.starts_with("data.") {
                return Err(Error::Argument(format!(
                    "metadata key `{k}` uses a reserved prefix"
                )));
            }
            if v.contains('\n') {
                return Err(Error::Argument(format!(
                    "metadata value for `{k}` spans lines"
                )));
            }
            kv.set(k, v);
        }
        for (k, v) in self.params.config.to_kv().iter() {
            kv.set(format!("model.{k}"), v);
        }
        kv.set("data.feature_names", join_names(&self.feature_names)?);
        kv.set("data.label_vocab", join_names(&self.label_vocab)?);
        kv.set("data.normalized", self.norm.is_some());

        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
        out.push_str(&kv.render());
        out.push_str("---\n");
        for (name, p) in self.params.named() {
            write_tensor(&mut out, &name, &p.value);
        }
        if let Some(norm) = &self.norm {
            let f = norm.mean.len();
            write_tensor(
                &mut out,
                "norm.mean",
                &Matrix::from_vec(1, f, norm.mean.clone())?,
            );
            write_tensor(
                &mut out,
                "norm.std",
                &Matrix::from_vec(1, f, norm.std.clone())?,
            );
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Compatibility(format!("checkpoint: {msg}"));
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("missing header line".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!(
                "unsupported version `{version}` (expected {FORMAT_VERSION})"
            )));
        }
        let mut meta_text = String::new();
        let mut found_separator = false;
        for (_, line) in lines.by_ref() {
            if line == "---" {
                found_separator = true;
                break;
            }
            meta_text.push_str(line);
            meta_text.push('\n');
        }
        if !found_separator {
            return Err(bad("missing `---` separator".into()));
        }
        let all = KvMap::parse(&meta_text)?;
        let model_kv = KvMap::parse(
            &all.iter()
                .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| format!("{k} = {v}\n")))
                .collect::<String>(),
        )?;
        let config = ModelConfig::from_kv(&model_kv).map_err(|e| bad(e.to_string()))?;
        let meta = all.filtered(|k| !k.starts_with("model.") && !k.starts_with("data."));
        let feature_names = split_names(all.get("data.feature_names").unwrap_or(""));
        let label_vocab = split_names(all.get("data.label_vocab").unwrap_or(""));
        let normalized: bool = all.parse_or("data.normalized", false)?;

        let mut tensors: Vec<(String, Matrix)> = Vec::new();
        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [tag, name, rows, cols] = parts[..] else {
                return Err(bad(format!(
                    "line {}: expected `tensor <name> <rows> <cols>`",
                    n + 1
                )));
            };
            if tag != "tensor" {
                return Err(bad(format!("line {}: expected a tensor header", n + 1)));
            }
            let rows: usize = rows
                .parse()
                .map_err(|_| bad(format!("line {}: bad row count", n + 1)))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| bad(format!("line {}: bad column count", n + 1)))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rn, row) = lines
                    .next()
                    .ok_or_else(|| bad(format!("tensor `{name}` is truncated")))?;
                let before = data.len();
                for tok in row.split(' ').filter(|t| !t.is_empty()) {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|_| bad(format!("line {}: bad number `{tok}`", rn + 1)))?,
                    );
                }
                if data.len() - before != cols {
                    return Err(bad(format!("line {}: expected {cols} values", rn + 1)));
                }
            }
            tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
        }

        let mut take = |name: &str| -> Option<Matrix> {
            let i = tensors.iter().position(|(n, _)| n == name)?;
            Some(tensors.swap_remove(i).1)
        };
        let mut params = TcemParams::init(&config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(params.tensors_mut()) {
            let m = take(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if m.shape() != p.value.shape() {
                return Err(bad(format!(
                    "tensor `{name}` is {:?}, model expects {:?}",
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m;
        }
        let norm = if normalized {
            let mean = take("norm.mean").ok_or_else(|| bad("missing tensor `norm.mean`".into()))?;
            let std = take("norm.std").ok_or_else(|| bad("missing tensor `norm.std`".into()))?;
            if mean.len() != config.features || std.len() != config.features {
                return Err(bad(
                    "normalization stats do not match the feature count".into()
                ));
            }
            Some(NormStats {
                mean: mean.as_slice().to_vec(),
                std: std.as_slice().to_vec(),
            })
        } else {
            None
        };
        if let Some((name, _)) = tensors.first() {
            return Err(bad(format!("unexpected tensor `{name}`")));
        }
        Ok(Self {
            params,
            meta,
            feature_names,
            label_vocab,
            norm,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
