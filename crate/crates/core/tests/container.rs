use neuroscrub::equiv::{compare, sample_inputs, Tolerance};
use neuroscrub::model::{gen_toy_model, read_model, write_model, Arch, CONTAINER_MAGIC};
use neuroscrub::scheme::{embed, keygen, EmbedBudget, Scheme, SignatureBits, DEFAULT_SIGNATURE};
use neuroscrub::Error;

#[test]
fn every_arch_survives_write_read_write() {
    for arch in Arch::ALL {
        let m = gen_toy_model(arch, None, 3).unwrap();
        let bytes = write_model(&m).unwrap();
        assert_eq!(&bytes[..4], &CONTAINER_MAGIC);
        let back = read_model(&bytes).unwrap();
        assert!(back.params_bit_eq(&m), "{arch}");
        assert_eq!(write_model(&back).unwrap(), bytes, "{arch}");
        let xs = sample_inputs(1, 8, &m.input_shape);
        assert!(compare(&m, &back, &xs, Tolerance::Bitwise).unwrap().bitwise_equal);
    }
}

#[test]
fn masks_are_stored() {
    let m = gen_toy_model(Arch::ResnetMini, None, 3).unwrap();
    let key = keygen(Scheme::LotteryMask, &m, &SignatureBits::from_text(DEFAULT_SIGNATURE), 2).unwrap();
    let wm = embed(&m, &key, EmbedBudget::default()).unwrap();
    let back = read_model(&write_model(&wm).unwrap()).unwrap();
    let id = key.carrier.blocks[0];
    assert_eq!(back.conv(id).unwrap().mask, wm.conv(id).unwrap().mask);
    assert!(back.conv(id).unwrap().mask.is_some());
}

#[test]
fn garbled_manifest_is_rejected() {
    let mut b = write_model(&gen_toy_model(Arch::TanhRnn, None, 1).unwrap()).unwrap();
    b[16] = b'#';
    assert!(matches!(read_model(&b), Err(Error::Manifest(_))));
}
