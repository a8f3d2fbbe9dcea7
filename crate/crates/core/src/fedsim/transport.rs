//! Framed message transport: a 4-byte big-endian length prefix followed by
//! the JSON body, over TCP or an in-process channel pair.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::messages::RoundMessage;
use super::FedError;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 30;

pub fn encode_frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn read_frame_from(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub trait FrameWriter: Send {
    fn write_frame(&mut self, body: &[u8]) -> io::Result<()>;
    /// Tear the link down so the peer's reads fail promptly.
    fn close(&mut self) {}
}

pub trait FrameReader: Send {
    /// Next frame body; `TimedOut` if none arrives within `timeout`.
    fn read_frame(&mut self, timeout: Duration) -> io::Result<Vec<u8>>;
}

/// Both directions of one peer link.
pub struct Connection {
    pub writer: Box<dyn FrameWriter>,
    pub reader: Box<dyn FrameReader>,
}

impl Connection {
    pub fn tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Self { writer: Box::new(TcpWriter(stream)), reader: Box::new(TcpReader(reader)) })
    }

    /// Two connected in-process endpoints.
    pub fn loopback_pair() -> (Self, Self) {
        let (tx_a, rx_a) = mpsc::channel();
        let (tx_b, rx_b) = mpsc::channel();
        (
            Self { writer: Box::new(ChannelWriter(tx_a)), reader: Box::new(ChannelReader(rx_b)) },
            Self { writer: Box::new(ChannelWriter(tx_b)), reader: Box::new(ChannelReader(rx_a)) },
        )
    }

    pub fn send(&mut self, msg: &RoundMessage) -> Result<(), FedError> {
        send_on(self.writer.as_mut(), msg)
    }

    pub fn recv(&mut self, timeout: Duration) -> Result<RoundMessage, FedError> {
        recv_on(self.reader.as_mut(), timeout)
    }
}

pub fn send_on(w: &mut dyn FrameWriter, msg: &RoundMessage) -> Result<(), FedError> {
    let body = serde_json::to_vec(msg).map_err(|e| FedError::Protocol(e.to_string()))?;
    w.write_frame(&body).map_err(FedError::Io)
}

pub fn recv_on(r: &mut dyn FrameReader, timeout: Duration) -> Result<RoundMessage, FedError> {
    let body = r.read_frame(timeout).map_err(|e| match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => FedError::Timeout(format!("no message within {timeout:?}")),
        _ => FedError::Io(e),
    })?;
    let msg: RoundMessage =
        serde_json::from_slice(&body).map_err(|e| FedError::Protocol(format!("malformed message: {e}")))?;
    if msg.version != super::messages::PROTOCOL_VERSION {
        return Err(FedError::VersionMismatch { ours: super::messages::PROTOCOL_VERSION, theirs: msg.version });
    }
    Ok(msg)
}

struct TcpWriter(TcpStream);

impl FrameWriter for TcpWriter {
    fn write_frame(&mut self, body: &[u8]) -> io::Result<()> {
        self.0.write_all(&encode_frame(body))?;
        self.0.flush()
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(std::net::Shutdown::Both);
    }
}

struct TcpReader(TcpStream);

impl FrameReader for TcpReader {
    fn read_frame(&mut self, timeout: Duration) -> io::Result<Vec<u8>> {
        self.0.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        read_frame_from(&mut self.0)
    }
}

struct ChannelWriter(Sender<Vec<u8>>);

impl FrameWriter for ChannelWriter {
    fn write_frame(&mut self, body: &[u8]) -> io::Result<()> {
        self.0.send(encode_frame(body)).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer gone"))
    }
}

struct ChannelReader(Receiver<Vec<u8>>);

impl FrameReader for ChannelReader {
    fn read_frame(&mut self, timeout: Duration) -> io::Result<Vec<u8>> {
        let frame = self.0.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => io::Error::new(io::ErrorKind::TimedOut, "timed out"),
            RecvTimeoutError::Disconnected => io::Error::new(io::ErrorKind::UnexpectedEof, "peer gone"),
        })?;
        read_frame_from(&mut frame.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::messages::Body;

    #[test]
    fn frame_prefix_is_big_endian() {
        let f = encode_frame(b"abc");
        assert_eq!(&f[..4], &[0, 0, 0, 3]);
        assert_eq!(read_frame_from(&mut f.as_slice()).unwrap(), b"abc");
        assert!(read_frame_from(&mut &f[..5]).is_err());
    }

    #[test]
    fn loopback_roundtrip_and_timeout() {
        let (mut a, mut b) = Connection::loopback_pair();
        let m = RoundMessage::new(0, 1, Body::RoundStart { selected: vec![1] });
        a.send(&m).unwrap();
        assert_eq!(b.recv(Duration::from_secs(1)).unwrap(), m);
        assert!(matches!(b.recv(Duration::from_millis(10)), Err(FedError::Timeout(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (mut a, mut b) = Connection::loopback_pair();
        let mut m = RoundMessage::new(0, 1, Body::RoundStart { selected: vec![] });
        m.version = 99;
        a.send(&m).unwrap();
        assert!(matches!(b.recv(Duration::from_secs(1)), Err(FedError::VersionMismatch { theirs: 99, .. })));
    }

    #[test]
    fn tcp_roundtrip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let mut c = Connection::tcp(TcpStream::connect(addr).unwrap()).unwrap();
            c.send(&RoundMessage::new(3, 2, Body::RoundStart { selected: vec![2] })).unwrap();
        });
        let mut s = Connection::tcp(listener.accept().unwrap().0).unwrap();
        let m = s.recv(Duration::from_secs(5)).unwrap();
        assert_eq!((m.round, m.sender), (3, 2));
        t.join().unwrap();
    }
}
