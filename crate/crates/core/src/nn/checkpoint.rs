//! Directory checkpoint: `manifest.txt` plus little-endian `tensors.bin`.
//!
//! ```text
//! hsicd-checkpoint 1
//! precision f32
//! bands 32
//! endmembers 4
//! size 40
//! channels 32 64 128 96
//! kernels 5 3 3 1
//! fc1 512
//! fc2 2
//! bn_eps 1e-5
//! bn_initialized 1 1 1 1 1
//! tensor conv1.spectral 0 32 1 5 5
//! ...
//! ```
//!
//! Each `tensor` line gives the name, the element offset into the blob and
//! the shape.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::adagrad::AdagradState;
use super::network::{Architecture, Network, CHANNELS, FC1_WIDTH, FC2_WIDTH, KERNELS};
use super::Scalar;
use crate::error::{Error, Result};
use crate::hsicube::write_file;

pub const CHECKPOINT_VERSION: &str = "1";
const MAGIC: &str = "hsicd-checkpoint";
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tensors in file order with their shapes: parameters, running statistics,
/// then optimizer accumulators.
fn tensor_list<'a, T: Scalar>(
    net: &'a Network<T>,
    state: &'a AdagradState<T>,
) -> Vec<(String, Vec<usize>, &'a [T])> {
    let names = net.param_names();
    let shapes = net.param_shapes();
    let mut out: Vec<(String, Vec<usize>, &[T])> = names
        .iter()
        .cloned()
        .zip(shapes.iter().cloned())
        .zip(net.params())
        .map(|((n, s), p)| (n, s, p))
        .collect();
    for (k, norm) in net.norms().into_iter().enumerate() {
        let c = vec![norm.channels()];
        out.push((format!("bn{}.running_mean", k + 1), c.clone(), &norm.running_mean));
        out.push((format!("bn{}.running_var", k + 1), c, &norm.running_var));
    }
    for ((n, s), acc) in names.iter().zip(shapes).zip(&state.accumulators) {
        out.push((format!("adagrad.{n}"), s, acc));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    state: &AdagradState<T>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = net.architecture();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(manifest, "precision {}", T::PRECISION);
    let _ = writeln!(manifest, "bands {}", arch.bands());
    let _ = writeln!(manifest, "endmembers {}", arch.endmembers());
    let _ = writeln!(manifest, "size {}", arch.input_size());
    let _ = writeln!(manifest, "channels {}", join(&CHANNELS));
    let _ = writeln!(manifest, "kernels {}", join(&KERNELS));
    let _ = writeln!(manifest, "fc1 {FC1_WIDTH}");
    let _ = writeln!(manifest, "fc2 {FC2_WIDTH}");
    let _ = writeln!(manifest, "bn_eps {:e}", net.bn_eps);
    let flags: Vec<usize> = net.norms().iter().map(|n| usize::from(n.initialized)).collect();
    let _ = writeln!(manifest, "bn_initialized {}", join(&flags));

    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, shape, values) in tensor_list(net, state) {
        let _ = writeln!(manifest, "tensor {name} {offset} {}", join(&shape));
        for &v in values {
            v.write_le(&mut blob);
        }
        offset += values.len();
    }
    write_file(&dir.join(BLOB), &blob)?;
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

struct Manifest {
    fields: HashMap<String, String>,
    tensors: HashMap<String, (usize, Vec<usize>)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::format("magic", format!("expected `{MAGIC}`, found `{header}`")));
    }
    let version = parts.next().unwrap_or_default();
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let mut fields = HashMap::new();
    let mut tensors = HashMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "tensor" {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::format("tensor", "missing name"))?;
            let nums: std::result::Result<Vec<usize>, _> = it.map(str::parse).collect();
            let nums = nums.map_err(|e| Error::format("tensor", format!("{name}: {e}")))?;
            let (&offset, shape) = nums
                .split_first()
                .ok_or_else(|| Error::format("tensor", format!("{name}: missing offset")))?;
            tensors.insert(name.to_string(), (offset, shape.to_vec()));
        } else {
            fields.insert(key.to_string(), rest.trim().to_string());
        }
    }
    Ok(Manifest { fields, tensors })
}

impl Manifest {
    fn field(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(key, "missing from manifest"))
    }

    fn number(&self, key: &str) -> Result<usize> {
        self.field(key)?
            .parse()
            .map_err(|e| Error::format(key, format!("{e}")))
    }

    fn numbers(&self, key: &str) -> Result<Vec<usize>> {
        self.field(key)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| Error::format(key, format!("{e}"))))
            .collect()
    }
}

/// Loads a checkpoint written by [`save_checkpoint`], validating every shape.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Network<T>, AdagradState<T>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m = parse_manifest(&text)?;

    let precision = m.field("precision")?;
    if precision != T::PRECISION.to_string() {
        return Err(Error::format(
            "precision",
            format!("checkpoint is {precision}, loader expects {}", T::PRECISION),
        ));
    }
    if m.numbers("channels")? != CHANNELS
        || m.numbers("kernels")? != KERNELS
        || m.number("fc1")? != FC1_WIDTH
        || m.number("fc2")? != FC2_WIDTH
    {
        return Err(Error::Shape(
            "checkpoint architecture constants differ from this build".into(),
        ));
    }
    let (bands, endmembers) = (m.number("bands")?, m.number("endmembers")?);
    let size = m.number("size")?;
    if size != bands + 2 * endmembers {
        return Err(Error::Shape(format!(
            "manifest size {size} is not bands + 2 * endmembers = {}",
            bands + 2 * endmembers
        )));
    }
    let bn_eps: f64 = m
        .field("bn_eps")?
        .parse()
        .map_err(|e| Error::format("bn_eps", format!("{e}")))?;
    let flags = m.numbers("bn_initialized")?;

    let mut net = Network::<T>::new(Architecture::new(bands, endmembers)?, 0);
    net.bn_eps = bn_eps;
    if flags.len() != net.norms().len() {
        return Err(Error::format("bn_initialized", "wrong number of flags"));
    }
    for (norm, &f) in net.norms_mut().into_iter().zip(&flags) {
        norm.initialized = f == 1;
    }
    let mut state = AdagradState::zeros_like(&net.params());

    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut expected_len = 0u64;
    let mut loaded: HashMap<String, Vec<T>> = HashMap::new();
    for (name, shape, values) in tensor_list(&net, &state) {
        let (offset, found) = m
            .tensors
            .get(&name)
            .ok_or_else(|| Error::format("tensor", format!("{name} missing from manifest")))?;
        if *found != shape {
            return Err(Error::Shape(format!(
                "{name} has shape {found:?} in the manifest, expected {shape:?}"
            )));
        }
        let start = offset * T::BYTES;
        let end = start + values.len() * T::BYTES;
        expected_len = expected_len.max(end as u64);
        if end > blob.len() {
            return Err(Error::Size {
                expected: end as u64,
                actual: blob.len() as u64,
            });
        }
        let data = blob[start..end].chunks(T::BYTES).map(T::read_le).collect();
        loaded.insert(name, data);
    }
    if expected_len != blob.len() as u64 {
        return Err(Error::Size {
            expected: expected_len,
            actual: blob.len() as u64,
        });
    }

    let names = net.param_names();
    for (name, p) in names.iter().zip(net.params_mut()) {
        p.copy_from_slice(&loaded[name]);
    }
    for (k, norm) in net.norms_mut().into_iter().enumerate() {
        norm.running_mean = loaded[&format!("bn{}.running_mean", k + 1)].clone();
        norm.running_var = loaded[&format!("bn{}.running_var", k + 1)].clone();
        if norm.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::format("running_var", "negative running variance"));
        }
    }
    for (name, acc) in names.iter().zip(&mut state.accumulators) {
        acc.copy_from_slice(&loaded[&format!("adagrad.{name}")]);
    }
    Ok((net, state))
}
