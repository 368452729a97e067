//! Loopback port allocation for containers and dependency stubs.

use std::collections::HashSet;
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::sync::Mutex;

use rand::Rng;

/// Allocated from a range below the usual ephemeral range so outgoing
/// connections never collide with a container's listen port.
const PORT_RANGE: std::ops::Range<u16> = 20_000..30_000;

static HANDED_OUT: Mutex<Option<HashSet<u16>>> = Mutex::new(None);

/// A loopback port that is currently free and not handed out before by
/// this process.
pub fn allocate_port() -> std::io::Result<u16> {
    let mut rng = rand::rng();
    let mut handed = HANDED_OUT.lock().unwrap_or_else(|p| p.into_inner());
    let handed = handed.get_or_insert_with(HashSet::new);
    for _ in 0..1_000 {
        let port = rng.random_range(PORT_RANGE);
        if handed.contains(&port) {
            continue;
        }
        if TcpListener::bind((Ipv4Addr::LOCALHOST, port)).is_ok() {
            handed.insert(port);
            return Ok(port);
        }
    }
    Err(std::io::Error::new(
        std::io::ErrorKind::AddrNotAvailable,
        "no free loopback port in 20000..30000",
    ))
}

pub fn loopback(port: u16) -> SocketAddr {
    SocketAddr::from((Ipv4Addr::LOCALHOST, port))
}
