//! Scripted HTTP server: answers requests in order with canned replies and
//! records what it received.

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub body: Vec<u8>,
}

pub struct Stub {
    pub url: String,
    pub received: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl Stub {
    pub fn start(replies: Vec<(u16, Vec<u8>)>) -> Stub {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let received = Arc::new(Mutex::new(Vec::new()));
        let log = received.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok(mut req) = server.recv() else { return };
                let mut buf = Vec::new();
                req.as_reader().read_to_end(&mut buf).unwrap();
                log.lock().unwrap().push(Recorded {
                    path: req.url().to_string(),
                    body: buf,
                });
                let resp = tiny_http::Response::from_data(body).with_status_code(status);
                let _ = req.respond(resp);
            }
        });
        Stub {
            url,
            received,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.received.lock().unwrap().clone()
    }

    /// Waits until every scripted reply was served.
    pub fn finish(mut self) -> Vec<Recorded> {
        self.handle.take().unwrap().join().unwrap();
        self.requests()
    }
}
