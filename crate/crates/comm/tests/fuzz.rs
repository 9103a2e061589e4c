use std::io::Cursor;

use fedhub_comm::frame::{read_frame, ReadError, DEFAULT_MAX_PAYLOAD};
use fedhub_comm::{decode_frame, encode_frame, Frame, FrameError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    Frame {
        msg_type: rng.random(),
        token: (0..rng.random_range(0..16)).map(|_| rng.random()).collect(),
        payload: (0..rng.random_range(0..64)).map(|_| rng.random()).collect(),
    }
}

#[test]
fn random_bytes_yield_structured_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0220);
    let mut accepted = 0;
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..rng.random_range(0..64)).map(|_| rng.random()).collect()
        } else {
            // Mutate a valid encoding so the header usually parses.
            let mut b = encode_frame(&random_frame(&mut rng)).unwrap();
            for _ in 0..rng.random_range(1..4) {
                let pos = rng.random_range(0..b.len());
                b[pos] = rng.random();
            }
            if rng.random::<f64>() < 0.3 {
                let cut = rng.random_range(0..b.len());
                b.truncate(cut);
            }
            b
        };
        match decode_frame(&bytes, 1024) {
            Ok(f) => {
                accepted += 1;
                assert_eq!(encode_frame(&f).unwrap(), bytes);
            }
            Err(FrameError::BadMagic(_))
            | Err(FrameError::UnsupportedVersion(_))
            | Err(FrameError::LengthMismatch { .. })
            | Err(FrameError::OversizedPayload { .. }) => {}
        }
        let mut cur = Cursor::new(bytes.as_slice());
        match read_frame(&mut cur, 1024) {
            Ok(f) => assert_eq!(cur.position() as usize, f.encoded_len()),
            Err(ReadError::Frame(_)) | Err(ReadError::Closed) => {}
            Err(ReadError::Io(e)) => panic!("unexpected io error {e}"),
        }
    }
    assert!(accepted > 0);
}

#[test]
fn stream_reader_stops_at_declared_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<Frame> = (0..50).map(|_| random_frame(&mut rng)).collect();
    let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f).unwrap()).collect();
    let mut cur = Cursor::new(stream.as_slice());
    for f in &frames {
        assert_eq!(&read_frame(&mut cur, DEFAULT_MAX_PAYLOAD).unwrap(), f);
    }
    assert!(matches!(read_frame(&mut cur, DEFAULT_MAX_PAYLOAD), Err(ReadError::Closed)));
}
