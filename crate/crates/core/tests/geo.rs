use eo1_core::geo::*;
use proptest::prelude::*;

fn brute_erode(m: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let r = r as i64;
    BinaryMask::from_fn(m.height(), m.width(), |i, j| {
        for di in -r..=r {
            for dj in -r..=r {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || jj < 0 || ii >= h || jj >= w || !m.get(ii as usize, jj as usize) {
                    return false;
                }
            }
        }
        true
    })
}

#[test]
fn haversine_closed_forms() {
    let a = GeoPoint::new(10.0, 20.0).unwrap();
    assert_eq!(haversine(&a, &a).unwrap(), 0.0);
    let o = GeoPoint::new(0.0, 0.0).unwrap();
    let n = GeoPoint::new(0.0, 90.0).unwrap();
    let q = std::f64::consts::FRAC_PI_2 * 6371.0;
    assert!((haversine(&o, &n).unwrap() - q).abs() < 1e-9);
    assert!((haversine(&o, &n).unwrap() - 10007.543398).abs() < 1e-6);
    let anti = GeoPoint { lon: 180.0, lat: 0.0, alt: 0.0 };
    assert!((haversine(&o, &anti).unwrap() - 20015.086796).abs() < 1e-6);
}

#[test]
fn haversine_rejects_nan() {
    let bad = GeoPoint { lon: f64::NAN, lat: 0.0, alt: 0.0 };
    let o = GeoPoint::new(0.0, 0.0).unwrap();
    assert!(haversine(&bad, &o).is_err());
    assert!(GeoPoint::new(f64::INFINITY, 0.0).is_err());
}

#[test]
fn knn_examples() {
    let refs: Vec<GeoPoint> = (0..4).map(|i| GeoPoint::new(i as f64 * 10.0, 5.0).unwrap()).collect();
    assert_eq!(knn(&[refs[3]], &refs, 1).unwrap(), vec![vec![3]]);
    let all = knn(&[refs[0]], &refs, 10).unwrap();
    assert_eq!(all[0].len(), 4);
    assert!(knn(&[refs[0]], &[], 1).is_err());
    // equidistant refs tie-break by index
    let q = GeoPoint::new(0.0, 0.0).unwrap();
    let sym = [GeoPoint::new(5.0, 0.0).unwrap(), GeoPoint::new(-5.0, 0.0).unwrap()];
    assert_eq!(knn(&[q], &sym, 2).unwrap()[0], vec![0, 1]);
}

#[test]
fn erosion_examples() {
    let z = BinaryMask::zeros(8, 8);
    assert_eq!(erode_mask(&z, 1).unwrap(), z);
    let o = erode_mask(&BinaryMask::ones(8, 8), 1).unwrap();
    let expect = BinaryMask::from_fn(8, 8, |i, j| (1..7).contains(&i) && (1..7).contains(&j));
    assert_eq!(o, expect);
    let mut single = BinaryMask::zeros(8, 8);
    single.set(4, 4, true);
    assert_eq!(erode_mask(&single, 1).unwrap().count_ones(), 0);
    assert!(erode_mask(&single, -1).is_err());
    assert_eq!(erode_mask(&single, 0).unwrap(), single);
}

#[test]
fn downsample_examples() {
    let f = area_downsample(&BinaryMask::ones(8, 8), 4).unwrap();
    assert!(f.data.iter().all(|&v| v == 1.0));
    let chk = BinaryMask::from_fn(8, 8, |i, j| (i + j) % 2 == 0);
    let f = area_downsample(&chk, 2).unwrap();
    assert!(f.data.iter().all(|&v| v == 0.5));
    let f = area_downsample(&BinaryMask::zeros(4, 4), 2).unwrap();
    assert!(f.data.iter().all(|&v| v == 0.0));
    assert!(area_downsample(&BinaryMask::ones(6, 8), 4).is_err());
}

#[test]
fn anchor_examples() {
    let b = BBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
    let one = grid_anchors(&b, 1).unwrap();
    assert_eq!((one[0].lon, one[0].lat), (5.0, 5.0));
    let two: Vec<(f64, f64)> = grid_anchors(&b, 2).unwrap().iter().map(|p| (p.lon, p.lat)).collect();
    assert_eq!(two, vec![(2.5, 7.5), (7.5, 7.5), (2.5, 2.5), (7.5, 2.5)]);
    let three = grid_anchors(&b, 3).unwrap();
    assert_eq!(three.len(), 9);
    assert!(BBox::new(5.0, 5.0, 0.0, 1.0).is_err());
    assert!(BBox::new(170.0, -170.0, 0.0, 1.0).is_err());
}

#[test]
fn window_examples() {
    let g = GridSpec::global(32, 64);
    let starts = |stride| sliding_windows(&g, (32, 32), stride).unwrap().iter().map(|w| w.col0).collect::<Vec<_>>();
    assert_eq!(starts(32), vec![0, 32]);
    assert_eq!(starts(24), vec![0, 24, 32]);
    assert_eq!(sliding_windows(&g, (32, 64), 8).unwrap().len(), 1);
    assert!(sliding_windows(&g, (33, 8), 8).is_err());
    let w = sliding_windows(&g, (16, 16), 16).unwrap();
    assert_eq!(w.len(), 8);
    assert_eq!(w[0].bbox, BBox::new(-180.0, -90.0, 0.0, 90.0).unwrap());
}

fn arb_mask() -> impl Strategy<Value = BinaryMask> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(prop::bool::weighted(0.75), h * w)
            .prop_map(move |v| BinaryMask::new(h, w, v.into_iter().map(|b| b as u8).collect()).unwrap())
    })
}

fn arb_point() -> impl Strategy<Value = GeoPoint> {
    (-180.0f64..180.0, -90.0f64..=90.0).prop_map(|(lon, lat)| GeoPoint { lon, lat, alt: 0.0 })
}

proptest! {
    #[test]
    fn haversine_symmetric_and_triangle(a in arb_point(), b in arb_point(), c in arb_point()) {
        let ab = haversine(&a, &b).unwrap();
        prop_assert_eq!(ab, haversine(&b, &a).unwrap());
        prop_assert!((0.0..=std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9).contains(&ab));
        let ac = haversine(&a, &c).unwrap();
        let cb = haversine(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn erosion_shrinks_and_composes(m in arb_mask(), r in 0i64..3) {
        let e = erode_mask(&m, r).unwrap();
        prop_assert!(e.is_subset_of(&m));
        prop_assert_eq!(&e, &brute_erode(&m, r as usize));
        let twice = erode_mask(&erode_mask(&m, 1).unwrap(), 1).unwrap();
        prop_assert_eq!(twice, erode_mask(&m, 2).unwrap());
    }

    #[test]
    fn downsample_preserves_mean(m in arb_mask(), p in 1usize..4) {
        let h = (m.height() / p).max(1) * p;
        let w = (m.width() / p).max(1) * p;
        prop_assume!(h <= m.height() && w <= m.width());
        let m = m.crop(0, 0, h, w);
        let f = area_downsample(&m, p).unwrap();
        prop_assert!((f.mean() - m.fraction()).abs() <= 1e-12);
    }

    #[test]
    fn anchors_inside_and_uniform(
        lon0 in -180.0f64..170.0, dl in 0.5f64..10.0,
        lat0 in -90.0f64..80.0, dt in 0.5f64..10.0, l in 1usize..7,
    ) {
        let b = BBox::new(lon0, (lon0 + dl).min(180.0), lat0, (lat0 + dt).min(90.0)).unwrap();
        let a = grid_anchors(&b, l).unwrap();
        prop_assert_eq!(a.len(), l * l);
        for p in &a {
            prop_assert!(p.lon > b.lon_min && p.lon < b.lon_max);
            prop_assert!(p.lat > b.lat_min && p.lat < b.lat_max);
        }
        let step = b.width() / l as f64;
        for r in 0..l {
            for c in 1..l {
                let d = a[r * l + c].lon - a[r * l + c - 1].lon;
                prop_assert!((d - step).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn knn_matches_exhaustive(refs in proptest::collection::vec(arb_point(), 1..60),
                              q in arb_point(), k in 1usize..8) {
        let got = knn(&[q], &refs, k).unwrap();
        let mut all: Vec<(f64, usize)> = refs.iter().enumerate()
            .map(|(i, r)| (haversine(&q, r).unwrap(), i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
        prop_assert_eq!(&got[0], &want);
    }
}
