use ndiff::{read_params, write_params, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn train(seed_values: &[f64], steps: usize) -> ParamStore {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::matrix(2, 2, seed_values.to_vec()));
    let b = store.insert("b", Tensor::matrix(1, 2, vec![0.0, 0.0]));
    let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.5, 0.9, -0.4]);
    let y = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.add(h, bv).unwrap();
        let out = g.sigmoid(h);
        let yv = g.input(y.clone());
        let loss = g.mse(out, yv).unwrap();
        g.backward(loss, &mut store).unwrap();
        store.adam_step(1e-2).unwrap();
    }
    store
}

#[test]
fn training_is_bitwise_deterministic() {
    let a = train(&[0.1, -0.2, 0.3, 0.4], 50);
    let b = train(&[0.1, -0.2, 0.3, 0.4], 50);
    for ((na, va), (nb, vb)) in a.named_values().zip(b.named_values()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u64> = va.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = vb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    assert_eq!(a.step_count(), 50);
}

#[test]
fn checkpoint_file_roundtrip() {
    let store = train(&[0.5, 0.5, -0.5, 0.25], 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.gapw");
    write_params(&store, std::fs::File::create(&path).unwrap()).unwrap();
    let back = read_params(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.len(), store.len());
    for ((na, va), (nb, vb)) in store.named_values().zip(back.named_values()) {
        assert_eq!(na, nb);
        assert_eq!(va, vb);
    }
}

proptest! {
    #[test]
    fn checkpoint_preserves_names_shapes_and_bits(
        tensors in prop::collection::vec(
            ("[a-z_.]{1,12}", 1usize..4, 1usize..5, any::<u64>()),
            1..6,
        )
    ) {
        let mut store = ParamStore::new();
        for (name, r, c, seed) in &tensors {
            let data = (0..r * c)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 12 | 0x3ff0_0000_0000_0000) - 1.5)
                .collect();
            store.insert(name, Tensor::matrix(*r, *c, data));
        }
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        let back = read_params(&buf[..]).unwrap();
        let orig: Vec<_> = store.named_values().collect();
        let read: Vec<_> = back.named_values().collect();
        prop_assert_eq!(orig, read);
    }
}
