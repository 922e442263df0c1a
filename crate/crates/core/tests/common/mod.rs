//! Brute-force references shared by the oracle and acceptance suites.

fn coords(i: usize, dims: [usize; 3]) -> [i64; 3] {
    [(i / (dims[1] * dims[2])) as i64, (i / dims[2] % dims[1]) as i64, (i % dims[2]) as i64]
}

/// Surface voxels: inside the mask with a face neighbour outside it or
/// outside the grid.
fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<[i64; 3]> {
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64)
            && mask[((p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| coords(i, dims))
        .filter(|&p| steps.iter().any(|s| !inside([p[0] + s[0], p[1] + s[1], p[2] + s[2]])))
        .collect()
}

pub fn brute_hausdorff(a: &[bool], b: &[bool], dims: [usize; 3]) -> f64 {
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&sa, &sb).max(directed(&sb, &sa)).sqrt()
}
