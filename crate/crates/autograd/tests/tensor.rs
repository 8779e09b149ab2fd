use eo1_autograd::*;

#[test]
fn permute_matches_index_formula() {
    let t = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
    let p = t.permute(&[2, 0, 1]);
    assert_eq!(p.shape(), &[4, 2, 3]);
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                assert_eq!(p.data()[c * 6 + a * 3 + b], t.data()[a * 12 + b * 4 + c]);
            }
        }
    }
    let back = p.permute(&[1, 2, 0]);
    assert_eq!(back, t);
}

#[test]
fn reshape_rejects_wrong_count() {
    assert!(Tensor::zeros(&[2, 3]).reshape(&[4]).is_err());
}
