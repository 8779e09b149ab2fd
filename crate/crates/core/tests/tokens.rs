use eo1_core::tokens::*;

#[test]
fn patchify_round_trip() {
    let data: Vec<f64> = (0..2 * 8 * 4).map(|v| v as f64).collect();
    let p = patchify(&data, 2, 8, 4, 2);
    assert_eq!(p.shape(), &[8, 8]);
    // token (0,1) channel 1 pixel (1,0) → source (c=1, row 1, col 2)
    assert_eq!(p.data()[8 + 4 + 2], data[32 + 4 + 2]);
    assert_eq!(unpatchify(&p, 2, 8, 4, 2).data(), &data[..]);
}
