//! Plane resampling shared by images, masks and saliency maps.
//!
//! Sample positions use half-pixel centres, so resizing to the same size is
//! the identity and upsampling by an integer factor never reads outside the
//! source grid.

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize of one row-major plane.
pub fn bilinear_plane(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane length does not match its shape");
    if h == th && w == tw {
        return src.to_vec();
    }
    let cols: Vec<(usize, usize, f64)> = (0..tw)
        .map(|x| {
            let sx = source_coord(x, w, tw);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = source_coord(y, h, th);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &cols {
            let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
            let bottom = (1.0 - fx) * r1[x0] + fx * r1[x1];
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

/// Index of the source sample used by nearest-neighbour resampling.
pub fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

pub fn nearest_plane<T: Copy>(src: &[T], h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w, "plane length does not match its shape");
    let cols: Vec<usize> = (0..tw).map(|x| nearest_index(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let row = &src[nearest_index(y, h, th) * w..][..w];
        out.extend(cols.iter().map(|&x| row[x]));
    }
    out
}

/// Maps an out-of-range index back into `0..n` by mirror reflection about the
/// edge samples (edge not repeated). Works for offsets larger than `n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
