use eo1_autograd::{ParamStore, Tensor};
use eo1_core::checkpoint::*;
use eo1_core::Error;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn round_trip_and_tamper() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::new(&[2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap());
    store.add("b", Tensor::scalar(7.0));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    rng.next_u64();
    let mut ck = Checkpoint::new("test", serde_json::json!({"k": 1}), 42).with_store("m", &store);
    ck.rng = Some(RngState::capture(&rng));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let mut other = store.clone();
    other.get_mut(store.id("a").unwrap()).data_mut()[0] = 0.0;
    back.load_store("m", &mut other).unwrap();
    assert_eq!(other.get(other.id("a").unwrap()).data()[0], 1.0);
    let mut r2 = back.rng.unwrap().restore().unwrap();
    assert_eq!(r2.next_u64(), rng.next_u64());

    let mut bad = bytes.clone();
    *bad.last_mut().unwrap() ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
}
