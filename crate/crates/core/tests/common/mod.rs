#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::{Rgb, RgbImage};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).expect("request body is JSON")
    }
}

type Handler = dyn Fn(&Recorded, usize) -> (u16, String) + Send + Sync;

/// One-request-per-connection HTTP/1.1 server on a loopback port.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    pub live: Arc<AtomicUsize>,
    pub peak: Arc<AtomicUsize>,
}

impl MockServer {
    /// `handler` gets the request and its zero-based arrival index.
    pub fn start(delay: Duration, handler: impl Fn(&Recorded, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (reqs, lv, pk) = (requests.clone(), live.clone(), peak.clone());
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (reqs, lv, pk, handler) = (reqs.clone(), lv.clone(), pk.clone(), handler.clone());
                thread::spawn(move || {
                    let now = lv.fetch_add(1, Ordering::SeqCst) + 1;
                    pk.fetch_max(now, Ordering::SeqCst);
                    serve(stream, delay, &reqs, handler.as_ref());
                    lv.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        Self { url, requests, live, peak }
    }

    /// Answers with `responses` in order, repeating the last one.
    pub fn sequence(responses: Vec<(u16, String)>) -> Self {
        Self::start(Duration::ZERO, move |_, i| responses[i.min(responses.len() - 1)].clone())
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, delay: Duration, reqs: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let get = |name: &str| {
        headers.iter().find(|(k, _): &&(String, String)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.clone())
    };
    let mut body = Vec::new();
    if let Some(n) = get("content-length").and_then(|v| v.parse::<usize>().ok()) {
        body.resize(n, 0);
        reader.read_exact(&mut body).unwrap();
    } else if get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).unwrap();
            let n = usize::from_str_radix(size.trim(), 16).unwrap();
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).unwrap();
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    }
    let rec = Recorded { method, path, headers, body };
    let index = {
        let mut r = reqs.lock().unwrap();
        r.push(rec.clone());
        r.len() - 1
    };
    thread::sleep(delay);
    let (status, text) = handler(&rec, index);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = out.flush();
}

pub fn chat_body(content: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 7},
    })
    .to_string()
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

/// Deterministic textured frame; `blur` is a horizontal box radius.
pub fn textured_frame(seed: u32, blur: u32, width: u32, height: u32) -> RgbImage {
    let mut state = seed.wrapping_mul(2654435761).wrapping_add(12345);
    let noise = RgbImage::from_fn(width, height, |x, y| {
        state = state.wrapping_mul(1664525).wrapping_add(1013904223);
        let base = ((x * 3 + y * 2) % 160) as u8;
        let v = base / 2 + (state >> 25) as u8 / 2;
        Rgb([v, v.wrapping_add(10), v.wrapping_add(20)])
    });
    RgbImage::from_fn(width, height, |x, y| {
        let lo = x.saturating_sub(blur);
        let hi = (x + blur).min(width - 1);
        let mut acc = [0u32; 3];
        for i in lo..=hi {
            for (a, c) in acc.iter_mut().zip(noise.get_pixel(i, y).0) {
                *a += u32::from(c);
            }
        }
        let n = hi - lo + 1;
        Rgb(acc.map(|a| (a / n) as u8))
    })
}

pub struct GoldenSample {
    pub id: &'static str,
    pub plate: &'static str,
    pub ocr_hint: Option<&'static str>,
    pub make: &'static str,
    pub model: &'static str,
}

pub const GOLDEN_SAMPLES: [GoldenSample; 3] = [
    GoldenSample { id: "g01", plate: "ABC1234", ocr_hint: Some("ABC1Z34"), make: "Renault", model: "Sandero" },
    GoldenSample { id: "g02", plate: "QRS5678", ocr_hint: Some("QRS5G78"), make: "Ford", model: "Ka" },
    GoldenSample { id: "g03", plate: "JKL0001", ocr_hint: None, make: "Nissan", model: "Rogue" },
];

pub const GOLDEN_CLASSES: [(&str, &str); 4] =
    [("Ford", "Fiesta"), ("Ford", "Ka"), ("Nissan", "Rogue"), ("Renault", "Sandero")];

/// Writes four frames plus a manifest per golden sample into `root/<id>/`.
pub fn write_golden_samples(root: &Path) -> Vec<PathBuf> {
    GOLDEN_SAMPLES
        .iter()
        .enumerate()
        .map(|(s, g)| {
            let dir = root.join(g.id);
            fs::create_dir_all(&dir).unwrap();
            let names: Vec<String> = (0..4).map(|i| format!("frame_{i:02}.png")).collect();
            for (i, name) in names.iter().enumerate() {
                textured_frame((s * 10 + i) as u32, [0, 3, 1, 6][i], 160, 96).save(dir.join(name)).unwrap();
            }
            let detections: Vec<Value> = (0..4)
                .flat_map(|i| {
                    [
                        json!({"frame_index": i, "kind": "vehicle", "bbox": [8, 4, 144, 88]}),
                        json!({"frame_index": i, "kind": "plate", "bbox": [50 + i, 60, 64, 22], "confidence": 0.9}),
                    ]
                })
                .collect();
            let manifest = json!({
                "sample_id": g.id,
                "frames": names,
                "gt": {"plate": g.plate, "make": g.make, "model": g.model},
                "ocr_hint": g.ocr_hint,
                "detections": detections,
            });
            let path = dir.join("manifest.json");
            fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap() + "\n").unwrap();
            path
        })
        .collect()
}

/// One masked rear-view image per class under `root/Make__Model/`.
pub fn write_golden_refs(root: &Path) {
    for (i, (make, model)) in GOLDEN_CLASSES.iter().enumerate() {
        let dir = root.join(format!("{make}__{model}"));
        fs::create_dir_all(&dir).unwrap();
        let c = i as u8 * 50;
        platelens_core::reflection::masked_fixture(64, 48, (6 + i as u32 * 2, 8, 40, 28), [c, 120, 220 - c])
            .save(dir.join("rear.png"))
            .unwrap();
    }
}

/// Scripted answers the golden cassettes were recorded from.
pub fn golden_stub_script() -> Value {
    json!({
        "The EasyOCR output is ABC1Z34": "```json\n{\"license_plate\": \"ABC-1234\"}\n```",
        "The EasyOCR output is QRS5G78": "{\"license_plate\": \"QRS5G78\"}",
        "The EasyOCR output is not available": "Sure! {\"license_plate\": \"jkl 0001\"}",
        "determine the make and model": "{\"make\": \"Renault\", \"model\": \"Sandero\"}",
        "similarity score": "The closest option is {\"make\": \"Ford\", \"model\": \"Ka\"}",
    })
}

/// Copies a directory tree.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &dest);
        } else {
            fs::copy(entry.path(), dest).unwrap();
        }
    }
}
