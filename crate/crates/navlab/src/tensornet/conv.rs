use super::graph::BackFn;
use super::{Elem, Tensor, TensorError};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView3, Ix1, Ix4};
use rayon::prelude::*;

/// Samples per parallel chunk. Fixed so that reduction order (and therefore
/// the floating-point result) is independent of the thread count.
const CHUNK: usize = 32;

/// Zero-padded 2-d convolution: `x (N, Cin, H, W)` with `w (Cout, Cin, kh, kw)`
/// and `b (Cout,)`, square stride/padding. Output `(N, Cout, Ho, Wo)` with
/// `Ho = (H + 2p - kh) / stride + 1`.
pub fn conv2d<'g, E: Elem>(
    x: Tensor<'g, E>,
    w: Tensor<'g, E>,
    b: Tensor<'g, E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<'g, E>, TensorError> {
    let g = x.graph();
    let xv = x
        .value()
        .into_dimensionality::<Ix4>()
        .map_err(|_| TensorError::BadShape {
            op: "conv2d",
            expected: "input (N, C, H, W)".into(),
            got: x.shape(),
        })?;
    let wv = w
        .value()
        .into_dimensionality::<Ix4>()
        .map_err(|_| TensorError::BadShape {
            op: "conv2d",
            expected: "weight (Cout, Cin, kh, kw)".into(),
            got: w.shape(),
        })?;
    let bv = b
        .value()
        .into_dimensionality::<Ix1>()
        .map_err(|_| TensorError::BadShape {
            op: "conv2d",
            expected: "bias (Cout,)".into(),
            got: b.shape(),
        })?;
    let (n, cin, h, wd) = xv.dim();
    let (cout, wcin, kh, kw) = wv.dim();
    if wcin != cin || bv.len() != cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(TensorError::Invalid(format!(
            "conv2d: kernel {kh}x{kw} stride {stride} pad {padding} does not fit input {h}x{wd}"
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let k = cin * kh * kw;
    let patch = ho * wo;

    let w_mat = wv
        .to_shape((cout, k))
        .expect("weight is contiguous")
        .to_owned();

    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();

    // Forward: per chunk, im2col then one GEMM.
    let results: Vec<(Array2<E>, Array2<E>)> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let sl = xv.slice(ndarray::s![s..e, .., .., ..]);
            let cols = im2col(&sl, kh, kw, stride, padding, ho, wo);
            let y = w_mat.dot(&cols);
            (cols, y)
        })
        .collect();

    let mut out = Array4::<E>::zeros((n, cout, ho, wo));
    let mut saved_cols = Vec::with_capacity(results.len());
    for (ci, (cols, y)) in results.into_iter().enumerate() {
        let (s, e) = chunks[ci];
        for ln in 0..e - s {
            let block = y.slice(ndarray::s![.., ln * patch..(ln + 1) * patch]);
            let block3 = block
                .to_owned()
                .into_shape_with_order((cout, ho, wo))
                .expect("block element count matches");
            out.slice_mut(ndarray::s![s + ln, .., .., ..]).assign(&block3);
        }
        saved_cols.push(cols);
    }
    for co in 0..cout {
        let bias = bv[co];
        out.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bias);
    }

    let (tx, tw, tb) = (
        g.is_tracked(x.id()),
        g.is_tracked(w.id()),
        g.is_tracked(b.id()),
    );
    let tracked = tx || tw || tb;
    let (px, pw, pb) = (x.id(), w.id(), b.id());

    let back: Option<BackFn<E>> = if tracked {
        let chunks_cl = chunks.clone();
        let w_mat_bk = w_mat.clone();
        Some(Box::new(move |gout, _values, grads| {
            let go = gout.view().into_dimensionality::<Ix4>().unwrap();
            // Per-chunk partials computed in parallel, reduced in chunk order.
            #[allow(clippy::type_complexity)]
            let partials: Vec<(Option<Array2<E>>, Option<Array4<E>>)> = chunks_cl
                .par_iter()
                .enumerate()
                .map(|(ci, &(s, e))| {
                    let cn = e - s;
                    // Reassemble (Cout, cn*patch) from gout.
                    let mut gy = Array2::<E>::zeros((cout, cn * patch));
                    for ln in 0..cn {
                        let src = go.slice(ndarray::s![s + ln, .., .., ..]);
                        let flat = src
                            .to_owned()
                            .into_shape_with_order((cout, patch))
                            .expect("sample element count matches");
                        gy.slice_mut(ndarray::s![.., ln * patch..(ln + 1) * patch])
                            .assign(&flat);
                    }
                    let dw = if tw {
                        Some(gy.dot(&saved_cols[ci].t()))
                    } else {
                        None
                    };
                    let dx = if tx {
                        let dcols = w_mat_bk.t().dot(&gy);
                        Some(col2im(
                            &dcols, cn, cin, h, wd, kh, kw, stride, padding, ho, wo,
                        ))
                    } else {
                        None
                    };
                    (dw, dx)
                })
                .collect();

            if tw {
                let mut dw = Array2::<E>::zeros((cout, k));
                for (p, _) in &partials {
                    dw += p.as_ref().unwrap();
                }
                let dw4 = dw
                    .into_shape_with_order((cout, cin, kh, kw))
                    .expect("weight shape");
                acc_dyn(&mut grads[pw], dw4.into_dyn());
            }
            if tx {
                let mut dx = Array4::<E>::zeros((go.dim().0, cin, h, wd));
                for (ci, (_, p)) in partials.iter().enumerate() {
                    let (s, e) = chunks_cl[ci];
                    dx.slice_mut(ndarray::s![s..e, .., .., ..])
                        .assign(p.as_ref().unwrap());
                }
                acc_dyn(&mut grads[px], dx.into_dyn());
            }
            if tb {
                let mut db = Array1::<E>::zeros(cout);
                for co in 0..cout {
                    db[co] = go.slice(ndarray::s![.., co, .., ..]).iter().copied().sum::<E>();
                }
                acc_dyn(&mut grads[pb], db.into_dyn());
            }
        }))
    } else {
        None
    };

    let id = g.push_node(out.into_dyn(), tracked, back);
    Ok(g.make_tensor(id))
}

fn acc_dyn<E: Elem>(slot: &mut Option<ArrayD<E>>, g: ArrayD<E>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

/// Unfold a chunk `(cn, Cin, H, W)` into `(Cin*kh*kw, cn*Ho*Wo)`.
fn im2col<E: Elem>(
    x: &ndarray::ArrayView4<'_, E>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Array2<E> {
    let (cn, cin, h, w) = x.dim();
    let k = cin * kh * kw;
    let patch = ho * wo;
    let mut cols = Array2::<E>::zeros((k, cn * patch));
    for ln in 0..cn {
        let sample: ArrayView3<'_, E> = x.index_axis(ndarray::Axis(0), ln);
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (c * kh + ki) * kw + kj;
                    let mut row = cols.row_mut(r);
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[ln * patch + oy * wo + ox] = sample[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column gradient back into input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Elem>(
    dcols: &Array2<E>,
    cn: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Array4<E> {
    let patch = ho * wo;
    let mut dx = Array4::<E>::zeros((cn, cin, h, w));
    for ln in 0..cn {
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (c * kh + ki) * kw + kj;
                    let row = dcols.row(r);
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(ln, c, iy as usize, ix as usize)] =
                                dx[(ln, c, iy as usize, ix as usize)] + row[ln * patch + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}
