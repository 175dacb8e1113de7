//! On-disk dataset formats.
//!
//! Annotations:
//! - `pts68`: a directory of `<stem>.pts` files (optional `version:` /
//!   `n_points:` / brace header lines, then 68 `x y` lines), each next to a
//!   `<stem>.ppm` or `<stem>.pgm` image.
//! - `wflw98-csv`: one CSV, each row `196 floats, 6 attribute bits,
//!   filename` with image paths relative to the CSV.
//! - `cofw29`: one CSV, each row `58 floats, filename`.
//!
//! Images are uncompressed PNM rasters: binary `P5`/`P6` or ASCII `P2`/`P3`,
//! maxval up to 255, normalized to [0, 1]; grayscale replicates to three
//! channels.

use std::fs;
use std::path::{Path, PathBuf};

use super::InMemoryDataset;
use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    Pts68,
    Wflw98Csv,
    Cofw29,
}

impl AnnotationFormat {
    pub fn parse(s: &str) -> Result<AnnotationFormat> {
        match s {
            "pts68" => Ok(AnnotationFormat::Pts68),
            "wflw98-csv" => Ok(AnnotationFormat::Wflw98Csv),
            "cofw29" => Ok(AnnotationFormat::Cofw29),
            other => Err(Error::Input(format!(
                "unknown annotation format '{other}' (expected pts68, wflw98-csv, or cofw29)"
            ))),
        }
    }

    pub fn num_landmarks(&self) -> usize {
        match self {
            AnnotationFormat::Pts68 => 68,
            AnnotationFormat::Wflw98Csv => 98,
            AnnotationFormat::Cofw29 => 29,
        }
    }

    /// Outer eye corners (left, right), 0-indexed.
    pub fn interocular_indices(&self) -> (usize, usize) {
        match self {
            AnnotationFormat::Pts68 => (36, 45),
            AnnotationFormat::Wflw98Csv => (60, 72),
            AnnotationFormat::Cofw29 => (8, 9),
        }
    }

    pub fn flip_map(&self) -> Vec<usize> {
        match self {
            AnnotationFormat::Pts68 => FLIP_68.to_vec(),
            AnnotationFormat::Wflw98Csv => FLIP_98.to_vec(),
            AnnotationFormat::Cofw29 => FLIP_29.to_vec(),
        }
    }
}

#[rustfmt::skip]
const FLIP_68: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17,
    27, 28, 29, 30,
    35, 34, 33, 32, 31,
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40,
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55,
    64, 63, 62, 61, 60, 67, 66, 65,
];

#[rustfmt::skip]
const FLIP_98: [usize; 98] = [
    32, 31, 30, 29, 28, 27, 26, 25, 24, 23, 22, 21, 20, 19, 18, 17, 16,
    15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
    46, 45, 44, 43, 42, 50, 49, 48, 47,
    37, 36, 35, 34, 33, 41, 40, 39, 38,
    51, 52, 53, 54,
    59, 58, 57, 56, 55,
    72, 71, 70, 69, 68, 75, 74, 73,
    64, 63, 62, 61, 60, 67, 66, 65,
    82, 81, 80, 79, 78, 77, 76,
    87, 86, 85, 84, 83,
    92, 91, 90, 89, 88,
    95, 94, 93,
    97, 96,
];

#[rustfmt::skip]
const FLIP_29: [usize; 29] = [
    1, 0, 3, 2, 6, 7, 4, 5, 9, 8, 11, 10, 14, 15, 12, 13,
    17, 16, 19, 18, 20, 21, 23, 22, 24, 25, 26, 27, 28,
];

const WFLW_ATTRIBUTES: [&str; 6] = [
    "pose", "expression", "illumination", "make-up", "occlusion", "blur",
];

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Read a PNM image into a `[3, H, W]` tensor in [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    // header tokens separated by whitespace, '#' comments run to end of line
    let next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err(path, 0, "unexpected end of PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" | "P2" => 1,
        "P6" | "P3" => 3,
        other => return Err(parse_err(path, 0, format!("unsupported PNM magic '{other}'"))),
    };
    let ascii = magic == "P2" || magic == "P3";
    let w: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, 0, "bad width"))?;
    let h: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, 0, "bad height"))?;
    let maxval: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| parse_err(path, 0, "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(path, 0, format!("unsupported maxval {maxval}")));
    }

    let count = w * h * channels;
    let raw: Vec<f64> = if ascii {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let v: usize = next_token(&bytes, &mut pos)?
                .parse()
                .map_err(|_| parse_err(path, 0, "bad ASCII pixel value"))?;
            vals.push(v as f64);
        }
        vals
    } else {
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + count {
            return Err(Error::Integrity(format!(
                "{}: raster needs {count} bytes, file has {}",
                path.display(),
                bytes.len().saturating_sub(pos)
            )));
        }
        bytes[pos..pos + count].iter().map(|&b| b as f64).collect()
    };

    let scale = 1.0 / maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    if channels == 1 {
        for i in 0..h * w {
            let v = raw[i] * scale;
            data[i] = v;
            data[h * w + i] = v;
            data[2 * h * w + i] = v;
        }
    } else {
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = raw[i * 3 + c] * scale;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Write a binary `P6` image from a `[3, H, W]` tensor (values clamped to
/// [0, 1]).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Contract(format!("write_ppm expects [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            let v = (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse one `.pts` file: optional header lines, then `x y` pairs.
pub fn read_pts(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path)?;
    let mut flat = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty()
            || line.starts_with("version:")
            || line.starts_with("n_points:")
            || line == "{"
            || line == "}"
        {
            continue;
        }
        let mut it = line.split_whitespace();
        let x = it
            .next()
            .ok_or_else(|| parse_err(path, lineno + 1, "missing x coordinate"))?;
        let y = it
            .next()
            .ok_or_else(|| parse_err(path, lineno + 1, "missing y coordinate"))?;
        if it.next().is_some() {
            return Err(parse_err(path, lineno + 1, "more than two values on a point line"));
        }
        let x: f64 = x
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad x value '{x}'")))?;
        let y: f64 = y
            .parse()
            .map_err(|_| parse_err(path, lineno + 1, format!("bad y value '{y}'")))?;
        flat.push(x);
        flat.push(y);
    }
    LandmarkSet::from_flat(&flat)
}

fn image_for_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["ppm", "pgm"] {
        let candidate = dir.join(format!("{stem}.{ext}"));
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(Error::Input(format!(
        "no .ppm/.pgm image for annotation stem '{stem}' in {}",
        dir.display()
    )))
}

fn load_pts_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().map(|x| x == "pts") == Some(true))
                .then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Input(format!("no .pts files in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for stem in &stems {
        let pts_path = dir.join(format!("{stem}.pts"));
        let landmarks = read_pts(&pts_path)?;
        if landmarks.len() != 68 {
            return Err(Error::Format(format!(
                "{}: expected 68 landmarks, found {}",
                pts_path.display(),
                landmarks.len()
            )));
        }
        let image = read_pnm(&image_for_stem(dir, stem)?)?;
        samples.push(Sample { image, landmarks, tags: Vec::new() });
    }
    Ok(samples)
}

fn load_csv(path: &Path, coords: usize, attributes: usize) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let want = coords + attributes + 1;
        if fields.len() != want {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected {want} fields, found {}", fields.len()),
            ));
        }
        let mut flat = Vec::with_capacity(coords);
        for (i, f) in fields[..coords].iter().enumerate() {
            flat.push(f.parse::<f64>().map_err(|_| {
                parse_err(path, lineno + 1, format!("bad coordinate '{f}' at field {i}"))
            })?);
        }
        let mut tags = Vec::new();
        for (bit, name) in fields[coords..coords + attributes].iter().zip(WFLW_ATTRIBUTES) {
            match *bit {
                "0" => {}
                "1" => tags.push(name.to_string()),
                other => {
                    return Err(parse_err(
                        path,
                        lineno + 1,
                        format!("attribute bit must be 0 or 1, found '{other}'"),
                    ))
                }
            }
        }
        let image = read_pnm(&base.join(fields[want - 1]))?;
        samples.push(Sample {
            image,
            landmarks: LandmarkSet::from_flat(&flat)?,
            tags,
        })
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("no rows in {}", path.display())));
    }
    Ok(samples)
}

/// Load a dataset from disk in the given annotation format.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<InMemoryDataset> {
    let samples = match format {
        AnnotationFormat::Pts68 => load_pts_dir(path)?,
        AnnotationFormat::Wflw98Csv => load_csv(path, 196, 6)?,
        AnnotationFormat::Cofw29 => load_csv(path, 58, 0)?,
    };
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("empty dataset".into()))?;
    let shape = first.image.shape();
    let image_size = (shape[1], shape[2]);
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != shape {
            return Err(Error::Format(format!(
                "sample {i} image shape {:?} differs from {shape:?}",
                s.image.shape()
            )));
        }
    }
    InMemoryDataset::new(
        samples,
        format.num_landmarks(),
        image_size,
        format.interocular_indices(),
        Some(format.flip_map()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use std::fs;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("slpt-fmt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn checker_image() -> Tensor {
        let mut data = vec![0.0; 3 * 8 * 8];
        for c in 0..3 {
            for i in 0..64 {
                data[c * 64 + i] = ((i + c) % 2) as f64;
            }
        }
        Tensor::from_vec(&[3, 8, 8], data).unwrap()
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tmp_dir("ppm");
        let path = dir.join("img.ppm");
        let img = checker_image();
        write_ppm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 8, 8]);
        for (a, b) in back.to_vec().iter().zip(img.to_vec()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn pts_directory_loads_68_point_samples() {
        let dir = tmp_dir("pts");
        let mut pts = String::from("version: 1\nn_points: 68\n{\n");
        for i in 0..68 {
            pts.push_str(&format!("{}.5 {}.25\n", i, i * 2));
        }
        pts.push('}');
        fs::write(dir.join("face0.pts"), &pts).unwrap();
        write_ppm(&dir.join("face0.ppm"), &checker_image()).unwrap();
        let ds = load_annotations(&dir, AnnotationFormat::Pts68).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_landmarks(), 68);
        let s = ds.sample(0).unwrap();
        assert_eq!(s.landmarks.len(), 68);
        assert_eq!(s.landmarks.get(0), (0.5, 0.25));
        assert_eq!(ds.interocular_indices(), (36, 45));
    }

    #[test]
    fn wrong_landmark_count_is_a_format_error() {
        let dir = tmp_dir("pts-short");
        fs::write(dir.join("bad.pts"), "1.0 2.0\n3.0 4.0\n").unwrap();
        write_ppm(&dir.join("bad.ppm"), &checker_image()).unwrap();
        assert!(matches!(
            load_annotations(&dir, AnnotationFormat::Pts68),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_pts_line_is_a_parse_error_with_location() {
        let dir = tmp_dir("pts-trunc");
        fs::write(dir.join("bad.pts"), "1.0 2.0\n3.0\n").unwrap();
        let err = read_pts(&dir.join("bad.pts")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn wflw_rows_carry_attribute_tags() {
        let dir = tmp_dir("wflw");
        write_ppm(&dir.join("f.ppm"), &checker_image()).unwrap();
        let coords: Vec<String> = (0..196).map(|i| format!("{}.0", i % 8)).collect();
        let row = format!("{},0,1,0,0,1,0,f.ppm", coords.join(","));
        let csv = dir.join("anno.csv");
        fs::write(&csv, row).unwrap();
        let ds = load_annotations(&csv, AnnotationFormat::Wflw98Csv).unwrap();
        assert_eq!(ds.num_landmarks(), 98);
        let s = ds.sample(0).unwrap();
        assert_eq!(s.tags, vec!["expression".to_string(), "occlusion".to_string()]);
    }

    #[test]
    fn cofw_rows_have_29_points() {
        let dir = tmp_dir("cofw");
        write_ppm(&dir.join("f.ppm"), &checker_image()).unwrap();
        let coords: Vec<String> = (0..58).map(|i| format!("{}.0", i % 8)).collect();
        fs::write(dir.join("anno.csv"), format!("{},f.ppm", coords.join(","))).unwrap();
        let ds = load_annotations(&dir.join("anno.csv"), AnnotationFormat::Cofw29).unwrap();
        assert_eq!(ds.num_landmarks(), 29);
        assert_eq!(ds.interocular_indices(), (8, 9));
    }

    #[test]
    fn malformed_csv_field_count_is_a_parse_error() {
        let dir = tmp_dir("csv-bad");
        fs::write(dir.join("anno.csv"), "1.0,2.0,f.ppm").unwrap();
        match load_annotations(&dir.join("anno.csv"), AnnotationFormat::Cofw29) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            _ => panic!("expected a parse error"),
        }
    }

    #[test]
    fn flip_tables_are_involutions() {
        for map in [FLIP_68.to_vec(), FLIP_98.to_vec(), FLIP_29.to_vec()] {
            for (k, &m) in map.iter().enumerate() {
                assert_eq!(map[m], k, "index {k}");
            }
        }
    }
}
