use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use gatekeeper_core::{parse_metadata, DatasetMetadata, Value};
use gatekeeper_store::{DatasetStore, DatasetStoreConfig, FetchError, StorageLocator};

const PENGUINS_CSV: &str = "island,bill_length\nA,55.1\nB,46.1\nA,50.7\nA,35.7\nB,47.0\nB,51.5\n";

fn penguin() -> DatasetMetadata {
    parse_metadata(
        "dataset_name: PENGUIN\nmax_contributions: 1\ncolumns:\n  - {name: island, kind: categorical, categories: [A, B]}\n  - {name: bill_length, kind: real, lower: 30.0, upper: 65.0}\n",
    )
    .unwrap()
}

/// Minimal HTTP/1.1 file server: `/penguins.csv`, `/slow.csv` (200 ms delay),
/// `/broken` (500), anything else 404. Returns the base URL and a hit counter.
fn serve() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = counter.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request = String::new();
                reader.read_line(&mut request).unwrap();
                let mut line = String::new();
                while reader.read_line(&mut line).unwrap() > 2 {
                    line.clear();
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let path = request.split_whitespace().nth(1).unwrap_or("/").to_owned();
                let (status, body) = match path.as_str() {
                    "/penguins.csv" => ("200 OK", PENGUINS_CSV),
                    "/slow.csv" => {
                        thread::sleep(Duration::from_millis(200));
                        ("200 OK", PENGUINS_CSV)
                    }
                    "/broken" => ("500 Internal Server Error", "boom"),
                    _ => ("404 Not Found", "missing"),
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status}\r\nContent-Type: text/csv\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    (base, hits)
}

fn assert_penguins(ds: &gatekeeper_core::Dataset) {
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.columns(), ["island", "bill_length"]);
    assert_eq!(ds.rows()[1], vec![Value::Category("B".into()), Value::Real(46.1)]);
}

#[test]
fn local_path_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("penguins.csv");
    std::fs::write(&path, PENGUINS_CSV).unwrap();
    let store = DatasetStore::default();
    let ds = store
        .fetch_dataset(&StorageLocator::local(path.to_str().unwrap()).unwrap(), &penguin())
        .unwrap();
    assert_penguins(&ds);
}

#[test]
fn http_fetch() {
    let (base, _) = serve();
    let store = DatasetStore::default();
    let ds = store
        .fetch_dataset(
            &StorageLocator::http(format!("{base}/penguins.csv")).unwrap(),
            &penguin(),
        )
        .unwrap();
    assert_penguins(&ds);
}

#[test]
fn error_mapping() {
    let (base, _) = serve();
    let dir = tempfile::tempdir().unwrap();
    let store = DatasetStore::default();
    let md = penguin();
    let local = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        StorageLocator::local(p.to_str().unwrap()).unwrap()
    };

    let missing_file = StorageLocator::local(dir.path().join("nope.csv").to_str().unwrap()).unwrap();
    assert!(matches!(
        store.fetch_dataset(&missing_file, &md),
        Err(FetchError::NotFound(_))
    ));
    let missing_url = StorageLocator::http(format!("{base}/nope.csv")).unwrap();
    assert!(matches!(
        store.fetch_dataset(&missing_url, &md),
        Err(FetchError::NotFound(_))
    ));
    let broken = StorageLocator::http(format!("{base}/broken")).unwrap();
    assert!(matches!(
        store.fetch_dataset(&broken, &md),
        Err(FetchError::Transport(_))
    ));
    // Nothing listens on port 1.
    let refused = StorageLocator::http("http://127.0.0.1:1/penguins.csv").unwrap();
    assert!(matches!(
        store.fetch_dataset(&refused, &md),
        Err(FetchError::Transport(_))
    ));

    let no_bill = local("a.csv", "island\nA\n");
    assert!(matches!(
        store.fetch_dataset(&no_bill, &md),
        Err(FetchError::SchemaMismatch(_))
    ));
    let bad_value = local("b.csv", "island,bill_length\nA,long\n");
    assert!(matches!(
        store.fetch_dataset(&bad_value, &md),
        Err(FetchError::SchemaMismatch(_))
    ));
    let ragged = local("c.csv", "island,bill_length\nA,40,extra\n");
    assert!(matches!(store.fetch_dataset(&ragged, &md), Err(FetchError::Parse(_))));
    let not_utf8 = dir.path().join("d.csv");
    std::fs::write(&not_utf8, b"island,bill_length\n\xff\xfe,40\n").unwrap();
    let not_utf8 = StorageLocator::local(not_utf8.to_str().unwrap()).unwrap();
    assert!(matches!(
        store.fetch_dataset(&not_utf8, &md),
        Err(FetchError::Parse(_) | FetchError::SchemaMismatch(_))
    ));
}

#[test]
fn caps() {
    let (base, _) = serve();
    let md = penguin();
    let url = StorageLocator::http(format!("{base}/penguins.csv")).unwrap();
    let rows = DatasetStore::new(DatasetStoreConfig {
        max_rows: 5,
        ..Default::default()
    });
    assert!(matches!(rows.fetch_dataset(&url, &md), Err(FetchError::TooLarge(_))));
    let bytes = DatasetStore::new(DatasetStoreConfig {
        max_bytes: 20,
        ..Default::default()
    });
    assert!(matches!(bytes.fetch_dataset(&url, &md), Err(FetchError::TooLarge(_))));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    std::fs::write(&p, PENGUINS_CSV).unwrap();
    let local = StorageLocator::local(p.to_str().unwrap()).unwrap();
    assert!(matches!(bytes.fetch_dataset(&local, &md), Err(FetchError::TooLarge(_))));
}

#[test]
fn concurrent_misses_fetch_once() {
    let (base, hits) = serve();
    let store = Arc::new(DatasetStore::default());
    let url = StorageLocator::http(format!("{base}/slow.csv")).unwrap();
    let barrier = Arc::new(Barrier::new(16));
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (store, url, barrier) = (store.clone(), url.clone(), barrier.clone());
            thread::spawn(move || {
                barrier.wait();
                store.fetch_dataset(&url, &penguin()).unwrap().len()
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), 6);
    }
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(store.fetch_count(), 1);
}

#[test]
fn ttl_expiry_refetches() {
    let (base, hits) = serve();
    let url = StorageLocator::http(format!("{base}/penguins.csv")).unwrap();
    let cached = DatasetStore::default();
    cached.fetch_dataset(&url, &penguin()).unwrap();
    cached.fetch_dataset(&url, &penguin()).unwrap();
    assert_eq!(cached.fetch_count(), 1);
    cached.invalidate();
    cached.fetch_dataset(&url, &penguin()).unwrap();
    assert_eq!(cached.fetch_count(), 2);

    let uncached = DatasetStore::new(DatasetStoreConfig {
        dataset_cache_ttl_seconds: 0,
        ..Default::default()
    });
    uncached.fetch_dataset(&url, &penguin()).unwrap();
    uncached.fetch_dataset(&url, &penguin()).unwrap();
    assert_eq!(uncached.fetch_count(), 2);
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn errors_are_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("late.csv");
    let loc = StorageLocator::local(p.to_str().unwrap()).unwrap();
    let store = DatasetStore::default();
    assert!(store.fetch_dataset(&loc, &penguin()).is_err());
    std::fs::write(&p, PENGUINS_CSV).unwrap();
    assert_eq!(store.fetch_dataset(&loc, &penguin()).unwrap().len(), 6);
}

#[test]
fn fetch_never_writes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    std::fs::write(&p, PENGUINS_CSV).unwrap();
    let before = std::fs::metadata(&p).unwrap().modified().unwrap();
    DatasetStore::default()
        .fetch_dataset(&StorageLocator::local(p.to_str().unwrap()).unwrap(), &penguin())
        .unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), PENGUINS_CSV);
    assert_eq!(std::fs::metadata(&p).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
