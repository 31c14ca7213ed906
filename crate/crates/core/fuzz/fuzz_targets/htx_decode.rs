#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = hairsynth::htx::decode(data) {
        // Anything accepted must survive a round trip.
        let again = hairsynth::htx::decode(&hairsynth::htx::encode(&t)).unwrap();
        assert_eq!(again.shape(), t.shape());
    }
});
