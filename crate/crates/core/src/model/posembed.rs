use ndarray::Array2;

/// Fixed 2D sine-cosine table for a `grid × grid` patch grid, one row per
/// position in row-major order. The first half of each row encodes the grid
/// row, the second half the grid column; each half is `[sin | cos]` over
/// geometrically spaced frequencies. `dim` must be a multiple of 4.
pub fn sincos_2d(dim: usize, grid: usize) -> Array2<f64> {
    assert!(dim.is_multiple_of(4), "positional width {dim} must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    Array2::from_shape_fn((grid * grid, dim), |(k, j)| {
        let (half, within) = (j / (dim / 2), j % (dim / 2));
        let pos = if half == 0 { k / grid } else { k % grid } as f64;
        let w = omega[within % quarter];
        if within < quarter {
            (pos * w).sin()
        } else {
            (pos * w).cos()
        }
    })
}
