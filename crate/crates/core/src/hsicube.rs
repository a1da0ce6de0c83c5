//! Hyperspectral cubes, binary maps and their on-disk formats.
//!
//! Cubes are held band-sequential in memory: all of band 0 (row-major), then
//! band 1, and so on. ENVI rasters in any of the three interleaves are
//! canonicalized on read; writes are always `bsq`, 32-bit float,
//! little-endian. Binary maps use 8-bit PGM (`P5`).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
    wavelengths: Option<Vec<f64>>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "cube data holds {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
            wavelengths: None,
        })
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != self.bands {
            return Err(Error::Shape(format!(
                "{} wavelengths for {} bands",
                wavelengths.len(),
                self.bands
            )));
        }
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.pixel_count() + row * self.width + col]
    }

    /// One band as a row-major plane.
    pub fn band(&self, band: usize) -> &[f32] {
        let plane = self.pixel_count();
        &self.data[band * plane..(band + 1) * plane]
    }

    /// Spectrum of pixel `index` (row-major pixel index), widened to f64.
    pub fn spectrum(&self, index: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        (0..self.bands)
            .map(|k| self.data[k * plane + index] as f64)
            .collect()
    }

    /// All spectra, pixel-major: `out[p * bands + k]`.
    pub fn spectra(&self) -> Vec<f64> {
        let plane = self.pixel_count();
        let mut out = vec![0.0; plane * self.bands];
        for k in 0..self.bands {
            for (p, &v) in self.band(k).iter().enumerate() {
                out[p * self.bands + k] = v as f64;
            }
        }
        out
    }

    pub fn same_geometry(&self, other: &HyperCube) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bands == other.bands
            && self.wavelengths == other.wavelengths
    }

    /// Keeps only the listed bands, in order. Indices must be strictly increasing.
    pub fn select_bands(&self, keep: &[usize]) -> Result<HyperCube> {
        if keep.is_empty() {
            return Err(Error::Config("band selection is empty".into()));
        }
        for (pos, &k) in keep.iter().enumerate() {
            if k >= self.bands {
                return Err(Error::Config(format!(
                    "band index {k} out of range for {} bands",
                    self.bands
                )));
            }
            if pos > 0 && keep[pos - 1] >= k {
                return Err(Error::Config(format!(
                    "band indices must be strictly increasing ({} then {k})",
                    keep[pos - 1]
                )));
            }
        }
        let mut data = Vec::with_capacity(keep.len() * self.pixel_count());
        for &k in keep {
            data.extend_from_slice(self.band(k));
        }
        Ok(HyperCube {
            height: self.height,
            width: self.width,
            bands: keep.len(),
            data,
            wavelengths: self
                .wavelengths
                .as_ref()
                .map(|w| keep.iter().map(|&k| w[k]).collect()),
        })
    }

    fn scaled(&self, factor: f32) -> HyperCube {
        HyperCube {
            data: self.data.iter().map(|v| v / factor).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel labels: 0 = unchanged, 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "map holds {} labels, expected {}",
                labels.len(),
                height * width
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::format(
                "labels",
                format!("label {} at index {i} is not 0 or 1", labels[i]),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count_changed(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Co-registered acquisitions of the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CubePair {
    time1: HyperCube,
    time2: HyperCube,
}

impl CubePair {
    pub fn new(time1: HyperCube, time2: HyperCube) -> Result<Self> {
        if !time1.same_geometry(&time2) {
            return Err(Error::Shape(format!(
                "cube pair mismatch: {}x{}x{} vs {}x{}x{} (or differing wavelengths)",
                time1.height, time1.width, time1.bands, time2.height, time2.width, time2.bands
            )));
        }
        Ok(Self { time1, time2 })
    }

    pub fn time1(&self) -> &HyperCube {
        &self.time1
    }

    pub fn time2(&self) -> &HyperCube {
        &self.time2
    }

    pub fn into_parts(self) -> (HyperCube, HyperCube) {
        (self.time1, self.time2)
    }

    pub fn select_bands(&self, keep: &[usize]) -> Result<CubePair> {
        CubePair::new(self.time1.select_bands(keep)?, self.time2.select_bands(keep)?)
    }
}

/// Divides both cubes by their joint maximum absolute value.
pub fn normalize_pair(pair: &CubePair) -> CubePair {
    let peak = pair
        .time1
        .data
        .iter()
        .chain(pair.time2.data.iter())
        .fold(0.0f32, |acc, v| acc.max(v.abs()));
    if peak == 0.0 {
        return pair.clone();
    }
    CubePair {
        time1: pair.time1.scaled(peak),
        time2: pair.time2.scaled(peak),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interleave {
    Bsq,
    Bil,
    Bip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SampleType {
    F32,
    U16,
    I16,
}

impl SampleType {
    fn from_code(code: &str) -> Option<Self> {
        match code {
            "4" => Some(SampleType::F32),
            "12" => Some(SampleType::U16),
            "2" => Some(SampleType::I16),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            SampleType::F32 => 4,
            SampleType::U16 | SampleType::I16 => 2,
        }
    }
}

/// Parsed ENVI header, restricted to the fields this crate understands.
#[derive(Debug, Clone)]
struct EnviHeader {
    samples: usize,
    lines: usize,
    bands: usize,
    interleave: Interleave,
    sample_type: SampleType,
    big_endian: bool,
    offset: u64,
    wavelengths: Option<Vec<f64>>,
}

fn parse_header_fields(text: &str) -> Result<HashMap<String, String>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(first) if first.trim() == "ENVI" => {}
        _ => return Err(Error::format("magic", "header does not start with `ENVI`")),
    }
    let mut fields = HashMap::new();
    let mut pending: Option<(String, String)> = None;
    for line in lines {
        if let Some((key, mut value)) = pending.take() {
            value.push(' ');
            value.push_str(line.trim());
            if value.contains('}') {
                fields.insert(key, value);
            } else {
                pending = Some((key, value));
            }
            continue;
        }
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if value.starts_with('{') && !value.contains('}') {
            pending = Some((key, value));
        } else {
            fields.insert(key, value);
        }
    }
    if let Some((key, _)) = pending {
        return Err(Error::format(key, "unterminated `{` list"));
    }
    Ok(fields)
}

fn required<'a>(fields: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(key, "missing"))
}

fn parse_count(fields: &HashMap<String, String>, key: &str) -> Result<usize> {
    let raw = required(fields, key)?;
    match raw.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(key, format!("expected a positive integer, got `{raw}`"))),
    }
}

impl EnviHeader {
    fn parse(text: &str) -> Result<Self> {
        let fields = parse_header_fields(text)?;
        let samples = parse_count(&fields, "samples")?;
        let lines = parse_count(&fields, "lines")?;
        let bands = parse_count(&fields, "bands")?;
        let interleave = match required(&fields, "interleave")?.to_ascii_lowercase().as_str() {
            "bsq" => Interleave::Bsq,
            "bil" => Interleave::Bil,
            "bip" => Interleave::Bip,
            other => return Err(Error::format("interleave", format!("unsupported `{other}`"))),
        };
        let code = required(&fields, "data type")?;
        let sample_type = SampleType::from_code(code)
            .ok_or_else(|| Error::format("data type", format!("unsupported code `{code}`")))?;
        let big_endian = match required(&fields, "byte order")? {
            "0" => false,
            "1" => true,
            other => return Err(Error::format("byte order", format!("expected 0 or 1, got `{other}`"))),
        };
        let offset = match fields.get("header offset") {
            None => 0,
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::format("header offset", format!("not an integer: `{raw}`")))?,
        };
        let wavelengths = match fields.get("wavelength") {
            None => None,
            Some(raw) => {
                let inner = raw.trim().trim_start_matches('{').trim_end_matches('}');
                let values = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::format("wavelength", format!("not a number: `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != bands {
                    return Err(Error::format(
                        "wavelength",
                        format!("{} values for {bands} bands", values.len()),
                    ));
                }
                Some(values)
            }
        };
        Ok(Self {
            samples,
            lines,
            bands,
            interleave,
            sample_type,
            big_endian,
            offset,
            wavelengths,
        })
    }
}

const RAW_EXTENSIONS: [&str; 7] = ["", "img", "raw", "dat", "bsq", "bil", "bip"];

/// Header/raw path pair for an ENVI dataset. `path` may name either file.
fn envi_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("hdr")) {
        (path.to_path_buf(), path.with_extension(""))
    } else {
        let mut hdr = path.as_os_str().to_owned();
        hdr.push(".hdr");
        (PathBuf::from(hdr), path.to_path_buf())
    }
}

fn locate_raw(header_path: &Path, default: PathBuf) -> Result<PathBuf> {
    if default.is_file() {
        return Ok(default);
    }
    for ext in RAW_EXTENSIONS.iter().filter(|e| !e.is_empty()) {
        let candidate = header_path.with_extension(ext);
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::io(
        default,
        std::io::Error::new(std::io::ErrorKind::NotFound, "companion raw file not found"),
    ))
}

/// Reads an ENVI raster (header path or raw path) into canonical bsq float layout.
pub fn read_envi(path: impl AsRef<Path>) -> Result<HyperCube> {
    let (header_path, raw_default) = envi_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header = EnviHeader::parse(&text)?;
    let raw_path = locate_raw(&header_path, raw_default)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let count = header.samples * header.lines * header.bands;
    let expected = header.offset + (count * header.sample_type.width()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Size {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let payload = &bytes[header.offset as usize..];
    let words = decode_samples(payload, header.sample_type, header.big_endian);
    if let Some(index) = words.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }

    let (h, w, b) = (header.lines, header.samples, header.bands);
    let data = match header.interleave {
        Interleave::Bsq => words,
        Interleave::Bil => {
            let mut out = vec![0.0; count];
            for r in 0..h {
                for k in 0..b {
                    for c in 0..w {
                        out[k * h * w + r * w + c] = words[(r * b + k) * w + c];
                    }
                }
            }
            out
        }
        Interleave::Bip => {
            let mut out = vec![0.0; count];
            for p in 0..h * w {
                for k in 0..b {
                    out[k * h * w + p] = words[p * b + k];
                }
            }
            out
        }
    };
    let cube = HyperCube::new(h, w, b, data)?;
    match header.wavelengths {
        Some(wl) => cube.with_wavelengths(wl),
        None => Ok(cube),
    }
}

fn decode_samples(payload: &[u8], kind: SampleType, big_endian: bool) -> Vec<f32> {
    match kind {
        SampleType::F32 => payload
            .chunks_exact(4)
            .map(|c| {
                let raw = [c[0], c[1], c[2], c[3]];
                if big_endian {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                }
            })
            .collect(),
        SampleType::U16 => payload
            .chunks_exact(2)
            .map(|c| {
                let raw = [c[0], c[1]];
                let v = if big_endian {
                    u16::from_be_bytes(raw)
                } else {
                    u16::from_le_bytes(raw)
                };
                v as f32
            })
            .collect(),
        SampleType::I16 => payload
            .chunks_exact(2)
            .map(|c| {
                let raw = [c[0], c[1]];
                let v = if big_endian {
                    i16::from_be_bytes(raw)
                } else {
                    i16::from_le_bytes(raw)
                };
                v as f32
            })
            .collect(),
    }
}

/// Writes `cube` as a bsq/float32/little-endian ENVI pair. `path` may name the
/// header (`*.hdr`) or the raw file; the other file is placed beside it.
pub fn write_envi(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    // Reject cubes assembled without going through `new` (e.g. via struct update in this module).
    if cube.data.len() != cube.height * cube.width * cube.bands {
        return Err(Error::Shape("cube data length does not match its dimensions".into()));
    }
    let (header_path, raw_path) = envi_paths(path.as_ref());
    let mut header = format!(
        "ENVI\ndescription = {{hsicd cube}}\nsamples = {}\nlines = {}\nbands = {}\nheader offset = 0\nfile type = ENVI Standard\ndata type = 4\ninterleave = bsq\nbyte order = 0\n",
        cube.width, cube.height, cube.bands
    );
    if let Some(wl) = &cube.wavelengths {
        let list: Vec<String> = wl.iter().map(|v| format!("{v}")).collect();
        header.push_str(&format!("wavelength units = Nanometers\nwavelength = {{{}}}\n", list.join(", ")));
    }
    let mut raw = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&raw_path, &raw)?;
    write_file(&header_path, header.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM; bytes >= 128 become label 1.
pub fn read_map(path: impl AsRef<Path>, expected: Option<(usize, usize)>) -> Result<BinaryMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let map = decode_pgm(&bytes)?;
    if let Some((h, w)) = expected {
        if (map.height, map.width) != (h, w) {
            return Err(Error::Shape(format!(
                "map is {}x{}, expected {h}x{w}",
                map.height, map.width
            )));
        }
    }
    Ok(map)
}

fn decode_pgm(bytes: &[u8]) -> Result<BinaryMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("magic", "not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(name, "missing or not a number"))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("maxval", format!("{maxval} unsupported (8-bit only)")));
    }
    // exactly one whitespace byte ends the header
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != width * height {
        return Err(Error::Size {
            expected: (width * height) as u64,
            actual: pixels.len() as u64,
        });
    }
    let labels = pixels.iter().map(|&v| u8::from(v >= 128)).collect();
    BinaryMap::new(height, width, labels)
}

pub fn write_map(map: &BinaryMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.labels.iter().map(|&l| if l == 1 { 255u8 } else { 0 }));
    write_file(path.as_ref(), &out)
}
