//! Tasks: generation, whitening, rotation, label handling and file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::linalg::{self, eigh_psd, gaussian_matrix, haar_orthogonal, Mat};
use crate::{LabError, Result};

/// Relative whitening tolerance: `|XX^T - I|_F <= WHITEN_TOL * sqrt(d_x)`.
pub const WHITEN_TOL: f64 = 1e-6;

pub const TASK_MAGIC: &[u8; 4] = b"CLT1";
pub const TASK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskMeta {
    pub name: String,
    pub seed: u64,
    pub whitened: bool,
    pub rank_cap: Option<usize>,
}

/// One continual-learning task. Columns of `inputs` and `labels` are samples.
///
/// The second-moment statistics `XX^T`, `YX^T` and `|Y|_F^2` are cached at
/// construction so training and curvature cost do not scale with `n`.
#[derive(Debug, Clone)]
pub struct Task {
    inputs: Mat,
    labels: Mat,
    pub meta: TaskMeta,
    sxx: Mat,
    syx: Mat,
    yy: f64,
}

impl PartialEq for Task {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs && self.labels == other.labels && self.meta == other.meta
    }
}

/// Frobenius distance of `XX^T` from the identity.
pub fn whitening_error(x: &Mat) -> f64 {
    let d = x.nrows();
    (x * x.transpose() - Mat::identity(d, d)).norm()
}

impl Task {
    pub fn new(inputs: Mat, labels: Mat, meta: TaskMeta) -> Result<Self> {
        if inputs.ncols() != labels.ncols() {
            return Err(LabError::DimensionMismatch(format!(
                "inputs have {} samples, labels have {}",
                inputs.ncols(),
                labels.ncols()
            )));
        }
        if inputs.nrows() == 0 || labels.nrows() == 0 {
            return Err(LabError::InvalidArgument("task dimensions must be >= 1".into()));
        }
        linalg::ensure_finite(&inputs, "task inputs")?;
        linalg::ensure_finite(&labels, "task labels")?;
        let sxx = &inputs * inputs.transpose();
        if meta.whitened {
            let err = (&sxx - Mat::identity(inputs.nrows(), inputs.nrows())).norm();
            if err > WHITEN_TOL * (inputs.nrows() as f64).sqrt() {
                return Err(LabError::NotWhitened(err));
            }
        }
        let syx = &labels * inputs.transpose();
        let yy = labels.norm_squared();
        Ok(Task {
            inputs,
            labels,
            meta,
            sxx,
            syx,
            yy,
        })
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn labels(&self) -> &Mat {
        &self.labels
    }

    pub fn d_x(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn d_y(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n(&self) -> usize {
        self.inputs.ncols()
    }

    /// `X X^T`.
    pub fn sxx(&self) -> &Mat {
        &self.sxx
    }

    /// `Y X^T`.
    pub fn syx(&self) -> &Mat {
        &self.syx
    }

    /// `|Y|_F^2`.
    pub fn yy(&self) -> f64 {
        self.yy
    }

    pub fn is_whitened(&self) -> bool {
        self.meta.whitened
    }

    /// Least-squares target `Y X^+` (equals `Y X^T` for whitened inputs).
    pub fn target_map(&self, rtol: f64) -> Result<Mat> {
        if self.meta.whitened {
            Ok(self.syx.clone())
        } else {
            Ok(&self.labels * linalg::pinv(&self.inputs, rtol)?)
        }
    }
}

/// An old task and its (usually rotated) successor.
#[derive(Debug, Clone)]
pub struct TaskPair {
    pub old: Task,
    pub new: Task,
    pub rotation: Option<Mat>,
}

/// Add i.i.d. Gaussian noise, then map `X <- (X X^T)^{-1/2} X`.
pub fn whiten<R: Rng + ?Sized>(x0: &Mat, noise_std: f64, rng: &mut R) -> Result<Mat> {
    let (d, n) = x0.shape();
    if n < d {
        return Err(LabError::InvalidArgument(format!(
            "whitening needs n >= d, got d={d}, n={n}"
        )));
    }
    if noise_std < 0.0 {
        return Err(LabError::InvalidArgument("noise_std must be >= 0".into()));
    }
    let xt = if noise_std > 0.0 {
        x0 + gaussian_matrix(d, n, noise_std, rng)
    } else {
        x0.clone()
    };
    let c = &xt * xt.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let (spec, v) = eigh_psd(&c).map_err(|_| LabError::SingularCovariance(0.0))?;
    let lmax = spec.max();
    let lmin = *spec.values().last().unwrap_or(&0.0);
    if lmax == 0.0 || lmin <= 1e-12 * lmax {
        return Err(LabError::SingularCovariance(lmin));
    }
    let inv_sqrt: Vec<f64> = spec.values().iter().map(|l| 1.0 / l.sqrt()).collect();
    let w = &v * Mat::from_diagonal(&nalgebra::DVector::from_vec(inv_sqrt)) * v.transpose();
    Ok(w * xt)
}

/// Rotate the inputs of `old` by a fresh Haar-distributed orthogonal matrix.
pub fn rotate_task<R: Rng + ?Sized>(old: &Task, rng: &mut R) -> Result<TaskPair> {
    if !old.is_whitened() {
        warn!("rotating a non-whitened task; alignment bounds assume whitened inputs");
    }
    let u = haar_orthogonal(old.d_x(), rng);
    rotate_task_with(old, u)
}

/// Rotate with an explicitly supplied orthogonal matrix.
pub fn rotate_task_with(old: &Task, u: Mat) -> Result<TaskPair> {
    if u.shape() != (old.d_x(), old.d_x()) {
        return Err(LabError::DimensionMismatch(format!(
            "rotation is {}x{}, inputs have dimension {}",
            u.nrows(),
            u.ncols(),
            old.d_x()
        )));
    }
    let mut meta = old.meta.clone();
    meta.name = format!("{}-rotated", old.meta.name);
    let new = Task::new(&u * old.inputs(), old.labels().clone(), meta)?;
    Ok(TaskPair {
        old: old.clone(),
        new,
        rotation: Some(u),
    })
}

pub fn modulo_rank_labels(labels: &[usize], r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return Err(LabError::InvalidArgument("rank cap must be >= 1".into()));
    }
    Ok(labels.iter().map(|l| l % r).collect())
}

/// One-hot columns in `R^d`.
pub fn embed_labels(classes: &[usize], d: usize) -> Result<Mat> {
    if let Some(&c) = classes.iter().find(|&&c| c >= d) {
        return Err(LabError::InvalidArgument(format!(
            "class {c} does not fit in dimension {d}"
        )));
    }
    let mut y = Mat::zeros(d, classes.len());
    for (j, &c) in classes.iter().enumerate() {
        y[(c, j)] = 1.0;
    }
    Ok(y)
}

/// Whitened Gaussian inputs with labels `G X + noise`, where `G` is a random
/// rank-`r` map whose nonzero singular values are all one.
pub fn synth_teacher_task<R: Rng + ?Sized>(
    d: usize,
    n: usize,
    r: usize,
    label_noise: f64,
    rng: &mut R,
) -> Result<Task> {
    if d == 0 || n < d {
        return Err(LabError::InvalidArgument(format!("need n >= d >= 1, got d={d}, n={n}")));
    }
    if r == 0 || r > d {
        return Err(LabError::InvalidArgument(format!("rank {r} outside [1, {d}]")));
    }
    let x0 = gaussian_matrix(d, n, 1.0, rng);
    let x = whiten(&x0, 0.0, rng)?;
    let q1 = haar_orthogonal(d, rng);
    let q2 = haar_orthogonal(d, rng);
    let g = q1.columns(0, r) * q2.columns(0, r).transpose();
    let mut y = &g * &x;
    if label_noise > 0.0 {
        y += gaussian_matrix(d, n, label_noise, rng);
    }
    Task::new(
        x,
        y,
        TaskMeta {
            name: format!("teacher-d{d}-r{r}"),
            seed: 0,
            whitened: true,
            rank_cap: Some(r),
        },
    )
}

/// Project raw features to `d` dimensions with a random orthonormal map,
/// whiten, reduce labels modulo `r` and embed them one-hot in `R^d`.
pub fn rank_controlled_task<R: Rng + ?Sized>(
    raw: &Mat,
    classes: &[usize],
    d: usize,
    r: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Task> {
    if raw.ncols() != classes.len() {
        return Err(LabError::DimensionMismatch(format!(
            "{} feature columns vs {} labels",
            raw.ncols(),
            classes.len()
        )));
    }
    if d > raw.nrows() || r > d || r == 0 {
        return Err(LabError::InvalidArgument(format!(
            "need 1 <= r <= d <= {}, got d={d}, r={r}",
            raw.nrows()
        )));
    }
    let g = gaussian_matrix(raw.nrows(), d, 1.0, rng);
    let q = g.qr().q();
    let x0 = q.transpose() * raw;
    let x = whiten(&x0, noise_std, rng)?;
    let y = embed_labels(&modulo_rank_labels(classes, r)?, d)?;
    Task::new(
        x,
        y,
        TaskMeta {
            name: format!("idx-d{d}-r{r}"),
            seed: 0,
            whitened: true,
            rank_cap: Some(r),
        },
    )
}

fn parse_err(offset: usize, msg: impl Into<String>) -> LabError {
    LabError::Parse {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Read an unsigned-byte IDX file. One-dimensional files (labels) become a
/// `1 x n` matrix of raw values; image files become `(rows*cols) x n` with
/// entries scaled to `[0, 1]`.
pub fn load_idx(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(2, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if !(1..=3).contains(&ndim) {
        return Err(parse_err(3, format!("unsupported IDX rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let off = 4 + 4 * k;
        let b = bytes
            .get(off..off + 4)
            .ok_or_else(|| parse_err(bytes.len(), "truncated IDX dimensions"))?;
        dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    let header = 4 + 4 * ndim;
    let n = dims[0];
    let per: usize = dims[1..].iter().product();
    let need = n
        .checked_mul(per)
        .and_then(|t| t.checked_add(header))
        .ok_or_else(|| parse_err(4, "IDX dimensions overflow"))?;
    if bytes.len() < need {
        return Err(parse_err(bytes.len(), format!("truncated IDX body, expected {need} bytes")));
    }
    let body = &bytes[header..need];
    let scale = if ndim == 1 { 1.0 } else { 255.0 };
    Ok(Mat::from_fn(per, n, |i, j| body[j * per + i] as f64 / scale))
}

/// Class labels from a one-dimensional IDX file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let m = load_idx(path)?;
    if m.nrows() != 1 {
        return Err(parse_err(3, "label file must be one-dimensional"));
    }
    Ok(m.iter().map(|v| *v as usize).collect())
}

fn meta_to_text(meta: &TaskMeta) -> String {
    let mut s = String::new();
    s.push_str(&format!("name={}\n", meta.name.replace('\n', " ")));
    s.push_str(&format!("seed={}\n", meta.seed));
    s.push_str(&format!("whitened={}\n", meta.whitened));
    if let Some(r) = meta.rank_cap {
        s.push_str(&format!("rank_cap={r}\n"));
    }
    s
}

fn meta_from_text(text: &str, offset: usize) -> Result<TaskMeta> {
    let mut meta = TaskMeta::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(offset, format!("bad meta line {line:?}")))?;
        let bad = |_| parse_err(offset, format!("bad value for {k}: {v:?}"));
        match k {
            "name" => meta.name = v.to_string(),
            "seed" => meta.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "whitened" => {
                meta.whitened = v.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            }
            "rank_cap" => {
                meta.rank_cap =
                    Some(v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?)
            }
            _ => {}
        }
    }
    Ok(meta)
}

pub fn task_to_bytes(t: &Task) -> Vec<u8> {
    let meta = meta_to_text(&t.meta);
    let mut buf = Vec::with_capacity(32 + 8 * (t.inputs.len() + t.labels.len()) + meta.len());
    buf.extend_from_slice(TASK_MAGIC);
    buf.extend_from_slice(&TASK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.d_x() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.d_y() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.n() as u64).to_le_bytes());
    // nalgebra storage is column-major already
    for v in t.inputs.iter().chain(t.labels.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(k)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| parse_err(self.pos, "truncated task file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn task_from_bytes(bytes: &[u8]) -> Result<Task> {
    if bytes.len() < 4 || &bytes[..4] != TASK_MAGIC {
        return Err(parse_err(0, "bad task file magic"));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != TASK_VERSION {
        return Err(LabError::Version {
            found: version,
            expected: TASK_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(parse_err(bytes.len(), "truncated task file"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(LabError::Checksum { stored, computed });
    }
    let mut cur = Cursor {
        bytes: &bytes[..body_len],
        pos: 8,
    };
    let dx = cur.u32()? as usize;
    let dy = cur.u32()? as usize;
    let n = usize::try_from(cur.u64()?).map_err(|_| parse_err(16, "sample count overflow"))?;
    let count = |rows: usize| {
        rows.checked_mul(n)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| parse_err(16, "dimensions overflow"))
    };
    let nx = count(dx)?;
    let ny = count(dy)?;
    let read_mat = |cur: &mut Cursor, rows: usize, k: usize| -> Result<Mat> {
        let raw = cur.take(k * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat::from_vec(rows, n, vals))
    };
    let x = read_mat(&mut cur, dx, nx)?;
    let y = read_mat(&mut cur, dy, ny)?;
    let mlen = cur.u64()? as usize;
    let meta_off = cur.pos;
    let meta_bytes = cur.take(mlen)?;
    let text = std::str::from_utf8(meta_bytes).map_err(|_| parse_err(meta_off, "meta is not UTF-8"))?;
    let meta = meta_from_text(text, meta_off)?;
    if cur.pos != body_len {
        return Err(parse_err(cur.pos, "trailing bytes before checksum"));
    }
    Task::new(x, y, meta)
}

pub fn save_task(t: &Task, path: &Path) -> Result<()> {
    let bytes = task_to_bytes(t);
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| LabError::io(path, e))?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<Task> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    task_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn whiten_cases() {
        let mut rng = rng_from_seed(1);
        let q = haar_orthogonal(4, &mut rng);
        let w = whiten(&q, 0.0, &mut rng).unwrap();
        assert!((w - &q).norm() < 1e-8);
        let x0 = gaussian_matrix(8, 64, 1.0, &mut rng);
        let x = whiten(&x0, 0.01, &mut rng).unwrap();
        assert!(whitening_error(&x) <= 1e-6 * 8f64.sqrt());
        let row = Mat::from_row_slice(1, 2, &[3.0, 4.0]);
        let w = whiten(&row, 0.0, &mut rng).unwrap();
        assert!((w - Mat::from_row_slice(1, 2, &[0.6, 0.8])).norm() < 1e-12);
    }

    #[test]
    fn whiten_rejects_singular() {
        let mut rng = rng_from_seed(1);
        let x = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(whiten(&x, 0.0, &mut rng), Err(LabError::SingularCovariance(_))));
    }

    #[test]
    fn labels_and_embedding() {
        let l: Vec<usize> = (0..10).collect();
        assert_eq!(modulo_rank_labels(&l, 10).unwrap(), l);
        assert_eq!(&modulo_rank_labels(&l, 2).unwrap()[..4], &[0, 1, 0, 1]);
        assert!(modulo_rank_labels(&l, 1).unwrap().iter().all(|&v| v == 0));
        let e = embed_labels(&[2], 4).unwrap();
        assert_eq!(e.column(0).as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(embed_labels(&[], 3).unwrap().shape(), (3, 0));
        let e = embed_labels(&[0, 1], 3).unwrap();
        assert_eq!(e, Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        assert!(embed_labels(&[3], 3).is_err());
    }

    #[test]
    fn idx_rejects_bad_magic() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(LabError::Parse { offset: 0, .. })));
    }
}
