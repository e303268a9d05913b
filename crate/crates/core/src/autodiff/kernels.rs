//! Forward kernels shared by the tape and the eager gradient builder.
//!
//! Both backward modes call exactly these functions, which keeps recorded and
//! plain gradients bit-identical.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>, ta: bool, tb: bool) -> Result<Array2<f64>> {
    let a = if ta { a.t() } else { a.view() };
    let b = if tb { b.t() } else { b.view() };
    if a.ncols() != b.nrows() {
        return Err(shape_err("matmul", format!("({}x{}) . ({}x{})", a.nrows(), a.ncols(), b.nrows(), b.ncols())));
    }
    Ok(a.dot(&b))
}

/// Output shape of a two-operand elementwise op; each dimension must agree or be 1.
pub fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

fn binary(op: &'static str, a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Array2<f64>> {
    let shape = broadcast_shape(op, a.dim(), b.dim())?;
    let a = a.broadcast(shape).expect("checked broadcast");
    let b = b.broadcast(shape).expect("checked broadcast");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out).and(&a).and(&b).for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

pub fn add(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Array2<f64>, c: f64) -> Array2<f64> {
    a.mapv(|x| x * c)
}

pub fn row_softmax(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

pub fn mask(a: &Array2<f64>, m: &Array2<f64>) -> Result<Array2<f64>> {
    if a.dim() != m.dim() {
        return Err(shape_err("mask", format!("{:?} vs mask {:?}", a.dim(), m.dim())));
    }
    Ok(a * m)
}

pub fn sum_rows(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

pub fn sum_cols(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn sum_all(a: &Array2<f64>) -> Array2<f64> {
    Array2::from_elem((1, 1), a.sum())
}

pub fn expand(a: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let ok = (a.nrows() == rows || a.nrows() == 1) && (a.ncols() == cols || a.ncols() == 1);
    if !ok {
        return Err(shape_err("expand", format!("{:?} -> ({rows}x{cols})", a.dim())));
    }
    Ok(a.broadcast((rows, cols)).expect("checked broadcast").to_owned())
}

pub fn diag(v: &Array2<f64>) -> Result<Array2<f64>> {
    if v.ncols() != 1 {
        return Err(shape_err("diag", format!("expected a column vector, got {:?}", v.dim())));
    }
    let n = v.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = v[[i, 0]];
    }
    Ok(out)
}

pub fn diag_part(a: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(shape_err("diag_part", format!("expected a square matrix, got {:?}", a.dim())));
    }
    Ok(Array2::from_shape_fn((a.nrows(), 1), |(i, _)| a[[i, i]]))
}

pub fn gather_rows(a: &Array2<f64>, index: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = index.iter().find(|&&i| i >= a.nrows()) {
        return Err(shape_err("gather_rows", format!("row {bad} out of {}", a.nrows())));
    }
    Ok(a.select(Axis(0), index))
}

pub fn scatter_rows(a: &Array2<f64>, index: &[usize], rows: usize) -> Result<Array2<f64>> {
    if a.nrows() != index.len() {
        return Err(shape_err("scatter_rows", format!("{} rows for {} indices", a.nrows(), index.len())));
    }
    let mut out = Array2::zeros((rows, a.ncols()));
    for (src, &dst) in index.iter().enumerate() {
        if dst >= rows {
            return Err(shape_err("scatter_rows", format!("row {dst} out of {rows}")));
        }
        let mut row = out.row_mut(dst);
        row += &a.row(src);
    }
    Ok(out)
}

/// Mean over rows of `logsumexp(z_i) - z_{i, y_i}`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    if logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(shape_err("cross_entropy", format!("{} rows for {} labels", logits.nrows(), labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= row.len() {
            return Err(shape_err("cross_entropy", format!("label {y} out of {}", row.len())));
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(Array2::from_elem((1, 1), total / labels.len() as f64))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

pub fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|x| x.is_finite())
}
