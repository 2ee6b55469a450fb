//! Patch partition (feature map to tokens) and patch merging (its inverse)
//! as flat index maps.

/// Index map for `[N, C, H, W] -> [N, (H/p)(W/p), p*p*C]`. Tokens follow the
/// patch grid row-major; inside a token the patch pixels are row-major with
/// channels varying fastest.
pub fn partition_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let mut idx = Vec::with_capacity(n * gh * gw * d);
    for b in 0..n {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + ty * p + py) * w + tx * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Index map for `[N, n, p*p*C] -> [N, C, H, W]`, the exact inverse of
/// [`partition_index`].
pub fn merge_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let part = partition_index(n, c, h, w, p);
    let mut inv = vec![0; part.len()];
    for (token_pos, &pixel) in part.iter().enumerate() {
        inv[pixel] = token_pos;
    }
    inv
}
