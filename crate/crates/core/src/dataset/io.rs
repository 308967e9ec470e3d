//! OFF meshes, xyz text, the `PCAP` binary blob and the class directory layout.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, normalize_unit_sphere, Dataset, PointCloudSample, Splits, MESH_SURFACE_POINTS};
use crate::config::DataFormat;
use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"PCAP";
const BLOB_VERSION: u16 = 1;

/// A polygon mesh; faces index into `vertices`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshSampling {
    /// Area-weighted surface sampling to 10,000 points, then subsampled.
    Surface,
    /// Subsample the mesh vertices directly.
    Vertices,
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn significant_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<T: std::str::FromStr>(file: &Path, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(file, line, format!("expected {what}, found `{tok}`")))
}

/// Parses OFF text; `file` is used only for error messages.
pub fn parse_off(text: &str, file: &Path) -> Result<Mesh> {
    let mut lines = significant_lines(text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(file, 1, "empty file, expected `OFF`"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| parse_err(file, hline, format!("expected `OFF` header, found `{header}`")))?
        .trim();
    // Some exporters glue the counts onto the header line.
    let (cline, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_err(file, hline + 1, "missing counts line"))?
    } else {
        (hline, rest)
    };
    let toks: Vec<&str> = counts.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(parse_err(file, cline, "counts line needs vertex and face counts"));
    }
    let nv: usize = parse_num(file, cline, toks[0], "vertex count")?;
    let nf: usize = parse_num(file, cline, toks[1], "face count")?;

    let mut mesh = Mesh {
        vertices: Vec::with_capacity(nv),
        faces: Vec::with_capacity(nf),
    };
    for k in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(file, cline + k + 1, format!("expected {nv} vertices, found {k}")))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(file, ln, "vertex needs three coordinates"));
        }
        let mut v = [0f64; 3];
        for c in 0..3 {
            v[c] = parse_num(file, ln, toks[c], "coordinate")?;
            if !v[c].is_finite() {
                return Err(parse_err(file, ln, "non-finite coordinate"));
            }
        }
        mesh.vertices.push(v);
    }
    for k in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(file, cline + nv + k + 1, format!("expected {nf} faces, found {k}")))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let arity: usize = parse_num(file, ln, toks[0], "face arity")?;
        if arity < 3 || toks.len() < arity + 1 {
            return Err(parse_err(file, ln, format!("face needs at least 3 and exactly {arity} indices")));
        }
        let face = toks[1..=arity]
            .iter()
            .map(|t| {
                let i: usize = parse_num(file, ln, t, "vertex index")?;
                if i >= nv {
                    return Err(parse_err(file, ln, format!("vertex index {i} out of range 0..{nv}")));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        mesh.faces.push(face);
    }
    Ok(mesh)
}

pub fn read_off(path: &Path) -> Result<Mesh> {
    parse_off(&read_text(path)?, path)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let (u, v) = (sub(b, a), sub(c, a));
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Picks `n` of `pool` without replacement when possible, otherwise tops up
/// with draws with replacement. Order of the kept items is preserved.
fn subsample<T: Copy>(pool: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    if pool.len() == n {
        return pool.to_vec();
    }
    if pool.len() > n {
        let mut idx = index::sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        return idx.into_iter().map(|i| pool[i]).collect();
    }
    let mut out = pool.to_vec();
    while out.len() < n {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out
}

/// Samples `n_points` from a mesh. Polygons are fan-triangulated.
pub fn sample_mesh(mesh: &Mesh, n_points: usize, mode: MeshSampling, seed: u64) -> Result<PointCloudSample> {
    if mesh.vertices.is_empty() {
        return Err(Error::Degenerate("mesh has no vertices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_f32 = |p: [f64; 3]| [p[0] as f32, p[1] as f32, p[2] as f32];
    let points = match mode {
        MeshSampling::Vertices => subsample(&mesh.vertices, n_points, &mut rng).into_iter().map(to_f32).collect(),
        MeshSampling::Surface => {
            let mut tris = Vec::new();
            let mut cumulative = Vec::new();
            let mut total = 0.0;
            for f in &mesh.faces {
                for k in 1..f.len() - 1 {
                    let t = [mesh.vertices[f[0]], mesh.vertices[f[k]], mesh.vertices[f[k + 1]]];
                    total += triangle_area(t[0], t[1], t[2]);
                    tris.push(t);
                    cumulative.push(total);
                }
            }
            if total <= 0.0 {
                return Err(Error::Degenerate("mesh has zero surface area".into()));
            }
            let dense: Vec<[f32; 3]> = (0..MESH_SURFACE_POINTS)
                .map(|_| {
                    let u = rng.random::<f64>() * total;
                    let i = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
                    let [a, b, c] = tris[i];
                    let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
                    if r1 + r2 > 1.0 {
                        r1 = 1.0 - r1;
                        r2 = 1.0 - r2;
                    }
                    to_f32(std::array::from_fn(|d| a[d] + r1 * (b[d] - a[d]) + r2 * (c[d] - a[d])))
                })
                .collect();
            subsample(&dense, n_points, &mut rng)
        }
    };
    Ok(PointCloudSample::new(points, 0))
}

pub fn parse_xyz(text: &str, file: &Path) -> Result<PointCloudSample> {
    let mut points = Vec::new();
    for (ln, l) in significant_lines(text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(file, ln, format!("expected `x y z`, found {} fields", toks.len())));
        }
        let mut p = [0f32; 3];
        for c in 0..3 {
            p[c] = parse_num(file, ln, toks[c], "coordinate")?;
            if !p[c].is_finite() {
                return Err(parse_err(file, ln, "non-finite coordinate"));
            }
        }
        points.push(p);
    }
    Ok(PointCloudSample::new(points, 0))
}

pub fn read_xyz(path: &Path) -> Result<PointCloudSample> {
    parse_xyz(&read_text(path)?, path)
}

pub fn write_blob(path: &Path, sample: &PointCloudSample) -> Result<()> {
    let n = u32::try_from(sample.len()).map_err(|_| Error::Argument("too many points for a blob".into()))?;
    let label = u32::try_from(sample.label).map_err(|_| Error::Argument("label does not fit in u32".into()))?;
    let mut buf = Vec::with_capacity(16 + sample.len() * 12);
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&3u16.to_le_bytes());
    buf.extend_from_slice(&label.to_le_bytes());
    for p in &sample.points {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<PointCloudSample> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    // binary files report byte offsets in place of line numbers
    let bad = |off: usize, msg: &str| parse_err(path, off, msg);
    if buf.len() < 16 {
        return Err(bad(0, "truncated header"));
    }
    if &buf[0..4] != BLOB_MAGIC {
        return Err(bad(0, "bad magic, expected `PCAP`"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != BLOB_VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let d = u16::from_le_bytes([buf[10], buf[11]]) as usize;
    let label = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if d != 3 {
        return Err(bad(10, &format!("point dimension {d}, expected 3")));
    }
    if buf.len() != 16 + n * d * 4 {
        return Err(bad(16, &format!("payload is {} bytes, expected {}", buf.len() - 16, n * d * 4)));
    }
    let vals: Vec<f32> = buf[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let points = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(PointCloudSample::new(points, label))
}

fn extension(format: DataFormat) -> &'static str {
    match format {
        DataFormat::Blob => "pcap",
        DataFormat::Xyz => "xyz",
        DataFormat::Off => "off",
    }
}

/// Loads one file and resizes it to `n_points`, without normalizing.
pub fn load_sample(path: &Path, format: DataFormat, n_points: usize, seed: u64) -> Result<PointCloudSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = match format {
        DataFormat::Off => return sample_mesh(&read_off(path)?, n_points, MeshSampling::Surface, seed),
        DataFormat::Xyz => read_xyz(path)?,
        DataFormat::Blob => read_blob(path)?,
    };
    if s.is_empty() {
        return Err(Error::Degenerate(format!("{} holds no points", path.display())));
    }
    s.points = subsample(&s.points, n_points, &mut rng);
    Ok(s)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() == want_dirs {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/{train,test}/<files>`. Class indices follow sorted
/// class-name order. When `known_classes` is given, any other class directory
/// is a schema error and indices follow the given list.
pub fn load_directory(
    root: &Path,
    format: DataFormat,
    n_points: usize,
    seed: u64,
    known_classes: Option<&[String]>,
) -> Result<Splits> {
    let class_dirs = sorted_entries(root, true)?;
    let found: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let class_names = match known_classes {
        Some(known) => {
            if let Some(bad) = found.iter().find(|c| !known.contains(c)) {
                return Err(Error::Schema(format!("unknown class `{bad}` under {}", root.display())));
            }
            known.to_vec()
        }
        None => found.clone(),
    };
    if class_names.is_empty() {
        return Err(Error::Schema(format!("no class directories under {}", root.display())));
    }
    let ext = extension(format);
    let mut splits = Splits {
        train: Dataset {
            samples: Vec::new(),
            class_names: class_names.clone(),
        },
        test: Dataset {
            samples: Vec::new(),
            class_names: class_names.clone(),
        },
    };
    let mut counter = 0u64;
    for (dir, name) in class_dirs.iter().zip(&found) {
        let label = class_names.iter().position(|c| c == name).expect("checked above");
        for (split, set) in [("train", &mut splits.train), ("test", &mut splits.test)] {
            let sub = dir.join(split);
            if !sub.is_dir() {
                continue;
            }
            for file in sorted_entries(&sub, false)? {
                if file.extension().and_then(|e| e.to_str()) != Some(ext) {
                    continue;
                }
                let s = load_sample(&file, format, n_points, derive_seed(seed, counter))?;
                counter += 1;
                let mut s = normalize_unit_sphere(&s)?;
                s.label = label;
                set.samples.push(s);
            }
        }
    }
    if splits.train.is_empty() {
        return Err(Error::Schema(format!("no `.{ext}` training files under {}", root.display())));
    }
    Ok(splits)
}

/// Loads a dataset directory with class names discovered from the layout.
pub fn load_dataset(root: &Path, format: DataFormat, n_points: usize, seed: u64) -> Result<Splits> {
    load_directory(root, format, n_points, seed, None)
}

/// Writes splits as blobs in the directory layout `load_directory` reads.
pub fn write_directory(root: &Path, splits: &Splits) -> Result<()> {
    for (split, set) in [("train", &splits.train), ("test", &splits.test)] {
        let mut counts = vec![0usize; set.num_classes()];
        for s in &set.samples {
            let name = set
                .class_names
                .get(s.label)
                .ok_or_else(|| Error::Schema(format!("label {} has no class name", s.label)))?;
            let dir = root.join(name).join(split);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_blob(&dir.join(format!("{name}_{:04}.pcap", counts[s.label])), s)?;
            counts[s.label] += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{synthetic_splits, Shape};
    use super::*;

    const CUBE_OFF: &str = "OFF\n# unit cube\n8 6 0\n\
        -0.5 -0.5 -0.5\n0.5 -0.5 -0.5\n0.5 0.5 -0.5\n-0.5 0.5 -0.5\n\
        -0.5 -0.5 0.5\n0.5 -0.5 0.5\n0.5 0.5 0.5\n-0.5 0.5 0.5\n\
        4 0 3 2 1\n4 4 5 6 7\n4 0 1 5 4\n4 2 3 7 6\n4 1 2 6 5\n4 0 4 7 3\n";

    fn on_cube(p: &[f32; 3]) -> bool {
        p.iter().all(|c| c.abs() <= 0.5 + 1e-6) && p.iter().any(|c| (c.abs() - 0.5).abs() <= 1e-6)
    }

    #[test]
    fn off_cube_vertex_sampling() {
        let mesh = parse_off(CUBE_OFF, Path::new("cube.off")).unwrap();
        assert_eq!((mesh.vertices.len(), mesh.faces.len()), (8, 6));
        let s = sample_mesh(&mesh, 8, MeshSampling::Vertices, 0).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.points.iter().all(on_cube));
    }

    #[test]
    fn off_cube_surface_sampling() {
        let mesh = parse_off(CUBE_OFF, Path::new("cube.off")).unwrap();
        let s = sample_mesh(&mesh, 256, MeshSampling::Surface, 4).unwrap();
        assert_eq!(s.len(), 256);
        assert!(s.points.iter().all(on_cube));
        // every face receives some share of the samples
        for axis in 0..3 {
            for sign in [-0.5f32, 0.5] {
                assert!(s.points.iter().any(|p| (p[axis] - sign).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn off_glued_header() {
        let text = CUBE_OFF.replacen("OFF\n# unit cube\n8 6 0", "OFF8 6 0", 1);
        let mesh = parse_off(&text, Path::new("glued.off")).unwrap();
        assert_eq!(mesh.vertices.len(), 8);
    }

    #[test]
    fn off_errors_carry_file_and_line() {
        let text = CUBE_OFF.replace("0.5 0.5 0.5\n", "0.5 zero 0.5\n");
        match parse_off(&text, Path::new("bad.off")) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, Path::new("bad.off"));
                assert_eq!(line, 10);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_off("PLY\n", Path::new("x")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn xyz_rows_and_comments() {
        let mut text = String::from("# header\n");
        for i in 0..1024 {
            text.push_str(&format!("{i} 0.5 -1e-3\n"));
        }
        let s = parse_xyz(&text, Path::new("a.xyz")).unwrap();
        assert_eq!(s.len(), 1024);
        assert!(matches!(
            parse_xyz("1 2\n", Path::new("a.xyz")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn blob_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pcap");
        let mut s = synthesize_cloud();
        s.points[0] = [f32::MIN_POSITIVE, -0.0, 1.0e-38];
        write_blob(&path, &s).unwrap();
        let back = read_blob(&path).unwrap();
        assert_eq!(back.label, s.label);
        let bits = |s: &PointCloudSample| -> Vec<u32> { s.points.iter().flatten().map(|c| c.to_bits()).collect() };
        assert_eq!(bits(&back), bits(&s));
    }

    fn synthesize_cloud() -> PointCloudSample {
        let mut s = super::super::synthesize(Shape::Torus, 100, 5);
        s.label = 7;
        s
    }

    #[test]
    fn blob_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pcap");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_blob(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn directory_round_trip_and_unknown_class() {
        let dir = tempfile::tempdir().unwrap();
        let splits = synthetic_splits(&[Shape::Sphere, Shape::Cone], 5, 32, 3).unwrap();
        write_directory(dir.path(), &splits).unwrap();
        let back = load_dataset(dir.path(), DataFormat::Blob, 32, 0).unwrap();
        // sorted class order: cone < sphere
        assert_eq!(back.train.class_names, vec!["cone", "sphere"]);
        assert_eq!(back.train.len(), 8);
        assert_eq!(back.test.len(), 2);
        assert_eq!(back.train.samples[0].label, 0);
        assert!(back.train.samples.iter().all(|s| s.max_norm() <= 1.0 + 1e-6));

        let known = vec!["sphere".to_string()];
        assert!(matches!(
            load_directory(dir.path(), DataFormat::Blob, 32, 0, Some(&known)),
            Err(Error::Schema(_))
        ));
    }
}
