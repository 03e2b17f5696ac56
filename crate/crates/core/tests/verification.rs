use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use usgan::data::intensity_to_unit;
use usgan::evaluation::verification::{encode_png_base64, mock_confidence, VerifyRequest};
use usgan::evaluation::{MockVerificationServer, PixelStatsEmbedder, VerificationClient, VerifyError};
use usgan::model::ImageBatch;
use usgan::Tensor;

const TIMEOUT: Duration = Duration::from_secs(10);

/// Constant-intensity images, one per entry.
fn flat(intensities: &[u8]) -> ImageBatch {
    let per = 3 * 8 * 8;
    let data = intensities.iter().flat_map(|&v| std::iter::repeat_n(intensity_to_unit(v), per)).collect();
    ImageBatch::new(Tensor::new(vec![intensities.len(), 3, 8, 8], data)).unwrap()
}

/// Confidence for two constant images: their embeddings differ by `Δ` in each
/// of the 3 means and 48 thumbnail cells and agree on the 3 deviations.
fn expected_flat(a: u8, b: u8) -> f64 {
    let delta = intensity_to_unit(a) - intensity_to_unit(b);
    100.0 * (-51.0 * delta * delta).exp()
}

#[test]
fn identical_images_score_100_and_known_pairs_match_the_formula() {
    let server = MockVerificationServer::start(None).unwrap();
    let client = VerificationClient::new(server.endpoint(), None, TIMEOUT);
    let x = flat(&[128, 128, 100]);
    let y = flat(&[128, 153, 200]);
    assert_eq!(client.score(&x, &y, 0).unwrap(), 100.0);
    let got = client.score(&x, &y, 1).unwrap();
    assert!((got - expected_flat(128, 153)).abs() < 1e-9, "{got}");
    let far = client.score(&x, &y, 2).unwrap();
    assert!((far - expected_flat(100, 200)).abs() < 1e-9 && far < 1.0, "{far}");
}

#[test]
fn score_all_keeps_pair_order_under_concurrency() {
    let server = MockVerificationServer::start(None).unwrap();
    let client = VerificationClient::new(server.endpoint(), None, TIMEOUT);
    let a: Vec<u8> = (0..7).map(|i| 100 + 5 * i).collect();
    let b = vec![120u8; 7];
    let scores = client.score_all(&flat(&a), &flat(&b), 3);
    assert_eq!(scores.len(), 7);
    for (i, s) in scores.into_iter().enumerate() {
        assert!((s.unwrap() - expected_flat(a[i], 120)).abs() < 1e-9);
    }
}

#[test]
fn bearer_token_is_required_when_configured() {
    let server = MockVerificationServer::start(Some("sesame".into())).unwrap();
    let x = flat(&[10]);
    let anonymous = VerificationClient::new(server.endpoint(), None, TIMEOUT);
    match anonymous.score(&x, &x, 0) {
        Err(e @ VerifyError::Status { status: 401, .. }) => assert!(!e.is_retryable()),
        other => panic!("expected 401, got {other:?}"),
    }
    let wrong = VerificationClient::new(server.endpoint(), Some("open".into()), TIMEOUT);
    assert!(matches!(wrong.score(&x, &x, 0), Err(VerifyError::Status { status: 401, .. })));
    let right = VerificationClient::new(server.endpoint(), Some("sesame".into()), TIMEOUT);
    assert_eq!(right.score(&x, &x, 0).unwrap(), 100.0);
}

#[test]
fn malformed_requests_are_rejected_by_the_mock() {
    let e = PixelStatsEmbedder::default();
    assert!(mock_confidence(&e, "{}").is_err());
    assert!(mock_confidence(&e, r#"{"image_a":"!!","image_b":"!!"}"#).is_err());
    let x = flat(&[77]);
    let body = serde_json::to_string(&VerifyRequest {
        image_a: encode_png_base64(&x, 0).unwrap(),
        image_b: encode_png_base64(&x, 0).unwrap(),
    })
    .unwrap();
    assert_eq!(mock_confidence(&e, &body).unwrap(), 100.0);
}

/// Serve one canned HTTP reply on a fresh port.
fn canned(status: &str, body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let status = status.to_string();
    std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = vec![0u8; 1 << 16];
        let mut seen = Vec::new();
        // Read headers, then the announced body.
        loop {
            let n = s.read(&mut buf).unwrap();
            seen.extend_from_slice(&buf[..n]);
            let text = String::from_utf8_lossy(&seen);
            if let Some(end) = text.find("\r\n\r\n") {
                let len = text
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                    .unwrap_or(0);
                if seen.len() >= end + 4 + len {
                    break;
                }
            }
            if n == 0 {
                break;
            }
        }
        let reply = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        s.write_all(reply.as_bytes()).unwrap();
    });
    format!("http://{addr}/verify")
}

#[test]
fn protocol_violations_and_server_errors_are_classified() {
    let x = flat(&[50]);
    let bad_json = VerificationClient::new(canned("200 OK", r#"{"score": 3}"#), None, TIMEOUT);
    assert!(matches!(bad_json.score(&x, &x, 0), Err(VerifyError::Protocol(_))));
    let out_of_range = VerificationClient::new(canned("200 OK", r#"{"confidence": 140}"#), None, TIMEOUT);
    assert!(matches!(out_of_range.score(&x, &x, 0), Err(VerifyError::Protocol(_))));
    let busy = VerificationClient::new(canned("503 Service Unavailable", "{}"), None, TIMEOUT);
    match busy.score(&x, &x, 0) {
        Err(e @ VerifyError::Status { status: 503, .. }) => assert!(e.is_retryable()),
        other => panic!("expected 503, got {other:?}"),
    }
}

#[test]
fn unreachable_backend_is_a_retryable_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = VerificationClient::new(format!("http://127.0.0.1:{port}/verify"), None, Duration::from_secs(2));
    let err = client.score(&flat(&[1]), &flat(&[1]), 0).unwrap_err();
    assert!(matches!(err, VerifyError::Transport(_) | VerifyError::Timeout), "{err:?}");
    assert!(err.is_retryable());
}
