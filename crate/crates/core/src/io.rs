//! File formats: key-value text documents, trajectory/pair CSVs, the binary
//! parameter container and content digests.
//!
//! Floats in text files are printed with 17 significant digits so every
//! value round-trips bit-exactly.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::integrator::{StepPairDataset, TrajectoryEnsemble};
use crate::models::{Arch, ModelFamily, ModelParams};
use crate::systems::{default_spec, SystemKind, SystemSpec};
use crate::tensor::{AdamState, Array};
use crate::training::EpochStats;

/// Formats a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Key-value documents: `[section]` headers over `key = value` lines.

pub type KvSection = (String, Vec<(String, String)>);

/// Renders sections as `[name]` blocks of `key = value` lines.
pub fn render_kv(sections: &[KvSection]) -> String {
    let mut out = String::new();
    for (name, entries) in sections {
        let _ = writeln!(out, "[{name}]");
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

/// Strict parse of the key-value format; malformed lines are errors.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<KvSection>> {
    let mut sections: Vec<KvSection> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::Format {
                    path: origin.to_string(),
                    reason: format!("line {}: unterminated section header", lineno + 1),
                });
            };
            sections.push((name.trim().to_string(), Vec::new()));
        } else if let Some((k, v)) = line.split_once('=') {
            let Some(section) = sections.last_mut() else {
                return Err(Error::Format {
                    path: origin.to_string(),
                    reason: format!("line {}: key before any [section]", lineno + 1),
                });
            };
            section.1.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(Error::Format {
                path: origin.to_string(),
                reason: format!("line {}: expected `key = value` or `[section]`", lineno + 1),
            });
        }
    }
    Ok(sections)
}

pub fn kv_section<'a>(
    sections: &'a [KvSection],
    name: &str,
    origin: &str,
) -> Result<&'a [(String, String)]> {
    sections
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, entries)| entries.as_slice())
        .ok_or_else(|| Error::Format {
            path: origin.to_string(),
            reason: format!("missing [{name}] section"),
        })
}

pub fn kv_get<'a>(entries: &'a [(String, String)], key: &str, origin: &str) -> Result<&'a str> {
    entries
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format {
            path: origin.to_string(),
            reason: format!("missing key `{key}`"),
        })
}

pub fn parse_num<T: std::str::FromStr>(value: &str, key: &str, origin: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Format {
        path: origin.to_string(),
        reason: format!("key `{key}`: cannot parse `{value}`"),
    })
}

// ---------------------------------------------------------------------------
// SystemSpec <-> kv entries.

/// Spec as kv entries. Ring topology and the type layout are regenerated
/// from `(kind, n)` on load; only scalar parameters are stored explicitly.
pub fn spec_to_kv(spec: &SystemSpec) -> Vec<(String, String)> {
    let gammas = spec
        .gamma_per_type
        .iter()
        .map(|g| fmt_f64(*g))
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("kind".into(), spec.kind.tag().into()),
        ("n".into(), spec.n_particles.to_string()),
        ("stiffness".into(), fmt_f64(spec.stiffness)),
        ("equilibrium_length".into(), fmt_f64(spec.equilibrium_length)),
        ("mass".into(), fmt_f64(spec.mass)),
        ("kbt".into(), fmt_f64(spec.kbt)),
        ("dt".into(), fmt_f64(spec.dt)),
        ("gamma_per_type".into(), gammas),
    ]
}

pub fn spec_from_kv(entries: &[(String, String)], origin: &str) -> Result<SystemSpec> {
    const KNOWN: [&str; 8] = [
        "kind",
        "n",
        "stiffness",
        "equilibrium_length",
        "mass",
        "kbt",
        "dt",
        "gamma_per_type",
    ];
    for (k, _) in entries {
        if !KNOWN.contains(&k.as_str()) {
            return Err(Error::Format {
                path: origin.to_string(),
                reason: format!("unknown spec key `{k}`"),
            });
        }
    }
    let kind = SystemKind::parse(kv_get(entries, "kind", origin)?)?;
    let n: usize = parse_num(kv_get(entries, "n", origin)?, "n", origin)?;
    let mut spec = default_spec(kind, n)?;
    spec.stiffness = parse_num(kv_get(entries, "stiffness", origin)?, "stiffness", origin)?;
    spec.equilibrium_length = parse_num(
        kv_get(entries, "equilibrium_length", origin)?,
        "equilibrium_length",
        origin,
    )?;
    spec.mass = parse_num(kv_get(entries, "mass", origin)?, "mass", origin)?;
    spec.kbt = parse_num(kv_get(entries, "kbt", origin)?, "kbt", origin)?;
    spec.dt = parse_num(kv_get(entries, "dt", origin)?, "dt", origin)?;
    let gammas: Result<Vec<f64>> = kv_get(entries, "gamma_per_type", origin)?
        .split(',')
        .map(|g| parse_num(g.trim(), "gamma_per_type", origin))
        .collect();
    spec.gamma_per_type = gammas?;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Trajectory and pair CSVs.

/// `traj_id,step,particle_id,x,y,z` with 17-significant-digit values.
pub fn write_ensemble_csv(path: &Path, ensemble: &TrajectoryEnsemble) -> Result<()> {
    let mut out = String::from("traj_id,step,particle_id,x,y,z\n");
    let shape = ensemble.positions.shape();
    let (n_traj, steps1, n) = (shape[0], shape[1], shape[2]);
    for t in 0..n_traj {
        for s in 0..steps1 {
            for p in 0..n {
                let xyz = ensemble.at(t, s, p);
                let _ = writeln!(
                    out,
                    "{t},{s},{p},{},{},{}",
                    fmt_f64(xyz[0]),
                    fmt_f64(xyz[1]),
                    fmt_f64(xyz[2])
                );
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sidecar for an ensemble CSV: schema version, spec, counts and seeds.
pub fn write_ensemble_meta(path: &Path, ensemble: &TrajectoryEnsemble, seed: u64) -> Result<()> {
    let seeds = ensemble
        .seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let sections = vec![
        (
            "meta".to_string(),
            vec![
                ("schema".into(), "brodyn-ensemble-v1".into()),
                ("n_trajectories".into(), ensemble.n_trajectories().to_string()),
                ("n_steps".into(), ensemble.n_steps().to_string()),
                ("seed".into(), seed.to_string()),
                ("trajectory_seeds".into(), seeds),
            ],
        ),
        ("spec".to_string(), spec_to_kv(&ensemble.spec)),
    ];
    std::fs::write(path, render_kv(&sections))?;
    Ok(())
}

/// `pair_id,traj_id,step,particle_id,x,y,z,x_next,y_next,z_next,vx,vy,vz`.
pub fn write_pairs_csv(path: &Path, dataset: &StepPairDataset) -> Result<()> {
    let mut out =
        String::from("pair_id,traj_id,step,particle_id,x,y,z,x_next,y_next,z_next,vx,vy,vz\n");
    let n = dataset.spec.n_particles;
    for pair in 0..dataset.len() {
        let (traj, step) = dataset.provenance[pair];
        for p in 0..n {
            let row = pair * n + p;
            let _ = write!(out, "{pair},{traj},{step},{p}");
            for a in [&dataset.inputs, &dataset.targets, &dataset.velocities] {
                for c in 0..3 {
                    let _ = write!(out, ",{}", fmt_f64(a.get2(row, c)));
                }
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sidecar for a pair dataset.
pub fn write_dataset_meta(path: &Path, dataset: &StepPairDataset) -> Result<()> {
    let sections = vec![
        (
            "meta".to_string(),
            vec![
                ("schema".into(), "brodyn-pairs-v1".into()),
                ("pairs".into(), dataset.len().to_string()),
                ("seed".into(), dataset.seed.to_string()),
            ],
        ),
        ("spec".to_string(), spec_to_kv(&dataset.spec)),
    ];
    std::fs::write(path, render_kv(&sections))?;
    Ok(())
}

/// Loads a pair dataset from its CSV and sidecar.
pub fn read_pairs(csv_path: &Path, meta_path: &Path) -> Result<StepPairDataset> {
    let origin = meta_path.display().to_string();
    let meta = parse_kv(&std::fs::read_to_string(meta_path)?, &origin)?;
    let head = kv_section(&meta, "meta", &origin)?;
    let schema = kv_get(head, "schema", &origin)?;
    if schema != "brodyn-pairs-v1" {
        return Err(Error::Format {
            path: origin,
            reason: format!("unsupported schema `{schema}`"),
        });
    }
    let pairs: usize = parse_num(kv_get(head, "pairs", &origin)?, "pairs", &origin)?;
    let seed: u64 = parse_num(kv_get(head, "seed", &origin)?, "seed", &origin)?;
    let spec = spec_from_kv(kv_section(&meta, "spec", &origin)?, &origin)?;

    let origin = csv_path.display().to_string();
    let text = std::fs::read_to_string(csv_path)?;
    let n = spec.n_particles;
    let rows = pairs * n;
    let mut inputs = vec![0.0; rows * 3];
    let mut targets = vec![0.0; rows * 3];
    let mut velocities = vec![0.0; rows * 3];
    let mut provenance = vec![(0u32, 0u32); pairs];
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("pair_id,") {
        return Err(Error::Format {
            path: origin,
            reason: "missing pairs header".to_string(),
        });
    }
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Format {
                path: origin,
                reason: format!("line {}: expected 13 fields", lineno + 2),
            });
        }
        let pair: usize = parse_num(fields[0], "pair_id", &origin)?;
        let traj: u32 = parse_num(fields[1], "traj_id", &origin)?;
        let step: u32 = parse_num(fields[2], "step", &origin)?;
        let p: usize = parse_num(fields[3], "particle_id", &origin)?;
        if pair >= pairs || p >= n {
            return Err(Error::Format {
                path: origin,
                reason: format!("line {}: pair or particle out of range", lineno + 2),
            });
        }
        provenance[pair] = (traj, step);
        let row = pair * n + p;
        for c in 0..3 {
            inputs[row * 3 + c] = parse_num(fields[4 + c], "x", &origin)?;
            targets[row * 3 + c] = parse_num(fields[7 + c], "x_next", &origin)?;
            velocities[row * 3 + c] = parse_num(fields[10 + c], "vx", &origin)?;
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Format {
            path: origin,
            reason: format!("expected {rows} data rows, found {seen}"),
        });
    }
    Ok(StepPairDataset {
        spec,
        inputs: Array::from_vec(vec![rows, 3], inputs)?,
        targets: Array::from_vec(vec![rows, 3], targets)?,
        velocities: Array::from_vec(vec![rows, 3], velocities)?,
        provenance,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Named-array container: text header + manifest, then raw LE f64 blobs.

const CONTAINER_MAGIC: &str = "brodyn-container v1";
const BLOB_SEPARATOR: &str = "---\n";

/// Writes metadata plus named arrays. The header is text; array data follows
/// as little-endian f64 at the offsets recorded in the manifest.
pub fn write_container(
    path: &Path,
    meta: &[(String, String)],
    entries: &[(String, &Array)],
) -> Result<()> {
    let mut header = String::new();
    let _ = writeln!(header, "{CONTAINER_MAGIC}");
    for (k, v) in meta {
        let _ = writeln!(header, "{k} = {v}");
    }
    let mut offset = 0usize;
    for (name, array) in entries {
        let dims = array
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let dims = if dims.is_empty() { "scalar".into() } else { dims };
        let _ = writeln!(header, "entry = {name} {dims} {offset}");
        offset += array.len() * 8;
    }
    let _ = writeln!(header, "blob_bytes = {offset}");
    header.push_str(BLOB_SEPARATOR);

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for (_, array) in entries {
        for v in array.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Metadata entries and named arrays of a container.
pub type ContainerContents = (Vec<(String, String)>, Vec<(String, Array)>);

/// Reads a container back: `(meta, named arrays)`.
pub fn read_container(path: &Path) -> Result<ContainerContents> {
    let origin = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let sep = BLOB_SEPARATOR.as_bytes();
    let split = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::Format {
            path: origin.clone(),
            reason: "missing blob separator".to_string(),
        })?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Format {
        path: origin.clone(),
        reason: "header is not utf-8".to_string(),
    })?;
    let blob = &bytes[split + sep.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(CONTAINER_MAGIC) {
        return Err(Error::Format {
            path: origin,
            reason: "bad magic line".to_string(),
        });
    }
    let mut meta = Vec::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut blob_bytes = None;
    for line in lines {
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format {
                path: origin,
                reason: format!("malformed header line `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "entry" => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Format {
                        path: origin,
                        reason: format!("malformed manifest entry `{v}`"),
                    });
                }
                let shape = if parts[1] == "scalar" {
                    Vec::new()
                } else {
                    parts[1]
                        .split('x')
                        .map(|d| parse_num(d, "shape", &origin))
                        .collect::<Result<Vec<usize>>>()?
                };
                let offset: usize = parse_num(parts[2], "offset", &origin)?;
                manifest.push((parts[0].to_string(), shape, offset));
            }
            "blob_bytes" => blob_bytes = Some(parse_num::<usize>(v, "blob_bytes", &origin)?),
            _ => meta.push((k.to_string(), v.to_string())),
        }
    }
    let expected = blob_bytes.ok_or_else(|| Error::Format {
        path: origin.clone(),
        reason: "missing blob_bytes".to_string(),
    })?;
    if blob.len() != expected {
        return Err(Error::Format {
            path: origin,
            reason: format!("blob is {} bytes, header says {expected}", blob.len()),
        });
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in manifest {
        let count: usize = shape.iter().product::<usize>().max(1);
        let end = offset + count * 8;
        if end > blob.len() {
            return Err(Error::Format {
                path: origin,
                reason: format!("entry `{name}` overruns the blob"),
            });
        }
        let data: Vec<f64> = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name, Array::from_vec(shape, data)?));
    }
    Ok((meta, entries))
}

// ---------------------------------------------------------------------------
// Model parameters and optimizer state on disk.

/// Self-describing parameter container; round-trips bit-exactly.
pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let arch = &params.arch;
    let meta = vec![
        ("format".to_string(), "brodyn-params-v1".to_string()),
        ("family".to_string(), params.family.tag().to_string()),
        ("n_types".to_string(), arch.n_types.to_string()),
        ("embed_dim".to_string(), arch.embed_dim.to_string()),
        ("hidden_dim".to_string(), arch.hidden_dim.to_string()),
        ("hidden_layers".to_string(), arch.hidden_layers.to_string()),
        ("msg_layers".to_string(), arch.msg_layers.to_string()),
        (
            "fixed_n".to_string(),
            arch.fixed_n.map_or("-".to_string(), |n| n.to_string()),
        ),
        (
            "force_head_linear".to_string(),
            arch.force_head_linear.to_string(),
        ),
    ];
    let entries: Vec<(String, &Array)> = params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, v)| (n.clone(), v))
        .collect();
    write_container(path, &meta, &entries)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let origin = path.display().to_string();
    let (meta, entries) = read_container(path)?;
    let get = |key: &str| -> Result<&str> {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                path: origin.clone(),
                reason: format!("missing `{key}`"),
            })
    };
    if get("format")? != "brodyn-params-v1" {
        return Err(Error::Format {
            path: origin,
            reason: "not a parameter container".to_string(),
        });
    }
    let family = ModelFamily::parse(get("family")?)?;
    let fixed_n = match get("fixed_n")? {
        "-" => None,
        v => Some(parse_num(v, "fixed_n", &origin)?),
    };
    let arch = Arch {
        n_types: parse_num(get("n_types")?, "n_types", &origin)?,
        embed_dim: parse_num(get("embed_dim")?, "embed_dim", &origin)?,
        hidden_dim: parse_num(get("hidden_dim")?, "hidden_dim", &origin)?,
        hidden_layers: parse_num(get("hidden_layers")?, "hidden_layers", &origin)?,
        msg_layers: parse_num(get("msg_layers")?, "msg_layers", &origin)?,
        fixed_n,
        force_head_linear: parse_num(get("force_head_linear")?, "force_head_linear", &origin)?,
    };
    let (names, values): (Vec<String>, Vec<Array>) = entries.into_iter().unzip();
    ModelParams::from_parts(family, arch, names, values)
}

/// Optimizer-state container: first/second moments plus step count.
pub fn save_opt_state(path: &Path, state: &AdamState) -> Result<()> {
    let (m, v) = state.moments();
    let meta = vec![
        ("format".to_string(), "brodyn-optstate-v1".to_string()),
        ("step".to_string(), state.step_count().to_string()),
    ];
    let mut entries: Vec<(String, &Array)> = Vec::with_capacity(m.len() * 2);
    for (i, a) in m.iter().enumerate() {
        entries.push((format!("m{i}"), a));
    }
    for (i, a) in v.iter().enumerate() {
        entries.push((format!("v{i}"), a));
    }
    write_container(path, &meta, &entries)
}

pub fn load_opt_state(path: &Path) -> Result<AdamState> {
    let origin = path.display().to_string();
    let (meta, entries) = read_container(path)?;
    let step: u64 = meta
        .iter()
        .find(|(k, _)| k == "step")
        .map(|(_, v)| parse_num(v, "step", &origin))
        .transpose()?
        .ok_or_else(|| Error::Format {
            path: origin.clone(),
            reason: "missing step".to_string(),
        })?;
    let half = entries.len() / 2;
    let mut m = Vec::with_capacity(half);
    let mut v = Vec::with_capacity(half);
    for (name, array) in entries {
        if name.starts_with('m') {
            m.push(array);
        } else {
            v.push(array);
        }
    }
    if m.len() != v.len() {
        return Err(Error::Format {
            path: origin,
            reason: "unbalanced moment arrays".to_string(),
        });
    }
    Ok(AdamState::from_parts(m, v, step))
}

// ---------------------------------------------------------------------------
// Histories and metric reports.

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{}",
            h.epoch,
            fmt_f64(h.train_loss),
            fmt_f64(h.val_loss)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_csv(path: &Path, report: &crate::evaluation::MetricReport) -> Result<()> {
    let mut out = String::from("step,position_error,kl\n");
    for (k, (pe, kl)) in report
        .position_error
        .iter()
        .zip(&report.kl)
        .enumerate()
    {
        let _ = writeln!(out, "{},{},{}", k + 1, fmt_f64(*pe), fmt_f64(*kl));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_summary(path: &Path, report: &crate::evaluation::MetricReport) -> Result<()> {
    let sections = vec![(
        "summary".to_string(),
        vec![
            ("model".into(), report.model.clone()),
            ("system".into(), report.spec_summary.clone()),
            ("n_init".into(), report.protocol.0.to_string()),
            ("seeds_per_init".into(), report.protocol.1.to_string()),
            ("steps".into(), report.protocol.2.to_string()),
            ("seed".into(), report.seed.to_string()),
            ("brownian_error".into(), fmt_f64(report.brownian_error)),
            (
                "pe_geometric_mean".into(),
                fmt_f64(report.pe_geometric_mean),
            ),
            (
                "kl_geometric_mean".into(),
                fmt_f64(report.kl_geometric_mean),
            ),
            ("diverged".into(), report.diverged.to_string()),
            (
                "total_pred_trajectories".into(),
                report.total_pred_trajectories.to_string(),
            ),
            (
                "degenerate_coordinates".into(),
                report.degenerate_coordinates.to_string(),
            ),
        ],
    )];
    std::fs::write(path, render_kv(&sections))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Digests.

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_encode(&hasher.finalize()))
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests;
