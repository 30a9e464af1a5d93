//! Simulated handsets.
//!
//! The seven reference devices use the randomized MAC addresses of the
//! clustering test set. Their probe-request elements are synthetic but
//! model-specific: supported rates, HT/VHT capabilities, extended
//! capabilities and vendor elements differ between models and are shared by
//! every MAC of one model.

use crate::capture::MacAddr;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    /// Addresses used in rotation, one per survey trajectory.
    pub macs: Vec<MacAddr>,
    /// Probe-request information elements as `(tag, value)`.
    pub model_info: Vec<(u8, Vec<u8>)>,
    pub wifi_tx_dbm: f64,
    pub ble_tx_dbm: Option<f64>,
    pub supports_ftm: bool,
}

impl DeviceProfile {
    pub fn mac_for_trajectory(&self, i: usize) -> MacAddr {
        self.macs[i % self.macs.len()]
    }
}

fn macs(list: &[&str]) -> Vec<MacAddr> {
    list.iter().map(|s| s.parse().expect("valid MAC literal")).collect()
}

const RATES_11B: &[u8] = &[0x02, 0x04, 0x0b, 0x16];
const RATES_OFDM: &[u8] = &[0x0c, 0x12, 0x18, 0x24, 0x30, 0x48, 0x60, 0x6c];

fn elements(ht_cap: u16, ampdu: u8, ext_cap: &[u8], vendor: &[u8], vht: Option<u32>) -> Vec<(u8, Vec<u8>)> {
    let mut ht = ht_cap.to_le_bytes().to_vec();
    ht.push(ampdu);
    ht.extend_from_slice(&[0xff, 0x00, 0x00, 0x00]);
    let mut out = vec![
        (0u8, Vec::new()),
        (1, [RATES_11B, &RATES_OFDM[..4]].concat()),
        (50, RATES_OFDM[4..].to_vec()),
        (45, ht),
        (127, ext_cap.to_vec()),
        (221, vendor.to_vec()),
    ];
    if let Some(v) = vht {
        out.push((191, v.to_le_bytes().to_vec()));
    }
    out
}

/// The seven handsets of the clustering test set, in bucket order.
pub fn reference_profiles() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile {
            name: "Galaxy S4".into(),
            macs: macs(&["D0:22:BE:F5:7C:B4"]),
            model_info: elements(
                0x012c,
                0x03,
                &[0x00, 0x00, 0x08],
                &[0x00, 0x50, 0xf2, 0x08, 0x00, 0x10],
                None,
            ),
            wifi_tx_dbm: 15.0,
            ble_tx_dbm: Some(0.0),
            supports_ftm: false,
        },
        DeviceProfile {
            name: "HTC One X".into(),
            macs: macs(&["E8:99:C4:99:57:24"]),
            model_info: elements(
                0x002d,
                0x17,
                &[0x00, 0x00, 0x00, 0x00, 0x01],
                &[0x00, 0x10, 0x18, 0x02, 0x00],
                None,
            ),
            wifi_tx_dbm: 14.0,
            ble_tx_dbm: Some(-2.0),
            supports_ftm: false,
        },
        DeviceProfile {
            name: "Galaxy S6".into(),
            macs: macs(&[
                "4E:0F:A0:57:F8:75",
                "26:45:19:1E:D5:FE",
                "1A:5B:0A:B1:7D:4A",
                "0E:BF:6D:4D:ED:A7",
                "42:B2:3B:14:49:F9",
                "1A:CF:16:13:A2:CB",
                "8C:F5:A3:3D:16:DA",
                "3A:DC:D3:0A:46:B6",
            ]),
            model_info: elements(
                0x01ef,
                0x17,
                &[0x04, 0x00, 0x0a, 0x02, 0x01, 0x40, 0x00, 0x40, 0x80],
                &[0x00, 0x16, 0x32, 0x80, 0x00],
                Some(0x0f81_51b2),
            ),
            wifi_tx_dbm: 16.0,
            ble_tx_dbm: Some(4.0),
            supports_ftm: false,
        },
        DeviceProfile {
            name: "Galaxy A11".into(),
            macs: macs(&[
                "6A:E0:23:0C:20:0F",
                "56:5C:AC:D6:13:30",
                "E2:01:19:D0:64:2D",
                "FA:05:BB:EA:47:2D",
                "A0:27:B6:EE:6A:A7",
                "7E:69:90:C6:C4:04",
                "DA:00:FD:35:82:25",
                "56:2F:2B:64:BC:C5",
                "F6:08:C4:AF:61:94",
                "16:0D:FA:80:F8:1F",
                "5E:99:98:7B:5A:BF",
                "96:96:27:97:22:4C",
                "FE:CB:1A:2E:F5:9A",
                "B2:78:9D:5C:B9:1A",
                "16:3C:FC:DF:1C:CA",
                "96:38:7C:5D:20:5C",
            ]),
            model_info: elements(
                0x0063,
                0x17,
                &[0x04, 0x00, 0x0a, 0x02, 0x01, 0x40, 0x00, 0x40, 0x01],
                &[0x00, 0x16, 0x32, 0x80, 0x01],
                Some(0x0380_0032),
            ),
            wifi_tx_dbm: 13.0,
            ble_tx_dbm: Some(2.0),
            supports_ftm: true,
        },
        DeviceProfile {
            name: "iPhone SE".into(),
            macs: macs(&[
                "82:31:01:8A:F3:AD",
                "AE:9E:BE:7A:F3:D3",
                "A6:E9:93:A7:9D:3E",
                "D2:C5:A7:8B:9E:2C",
                "46:33:10:CE:43:3B",
                "AA:CB:57:97:5E:5F",
                "1A:40:6D:01:B4:05",
                "96:C2:5B:09:D8:4E",
                "3A:E6:E3:9B:8E:6D",
                "56:D3:41:61:0B:0A",
                "A2:68:13:44:B2:EF",
                "8E:6A:CF:EF:6E:1F",
                "56:A2:4A:EE:D4:46",
                "E2:F7:83:DC:1E:E4",
                "22:29:5A:0D:F3:24",
                "B6:33:3F:4F:89:1A",
                "9E:3D:78:F4:38:5D",
            ]),
            model_info: elements(
                0x006f,
                0x17,
                &[0x04, 0x00, 0x08, 0x84, 0x00, 0x00, 0x00, 0x40],
                &[0x00, 0x17, 0xf2, 0x0a, 0x00, 0x01, 0x04],
                Some(0x0f90_7932),
            ),
            wifi_tx_dbm: 17.0,
            ble_tx_dbm: Some(8.0),
            supports_ftm: true,
        },
        DeviceProfile {
            name: "iPhone X".into(),
            macs: macs(&[
                "86:98:6E:73:89:1D",
                "86:AD:C7:47:02:39",
                "3E:6F:2D:B3:4D:BB",
                "76:8A:CB:74:73:90",
                "9A:2D:E5:A8:F1:5A",
                "76:34:D2:C0:89:71",
                "FE:B8:15:02:43:7C",
                "76:55:81:98:C3:78",
                "CE:56:BC:E7:3E:72",
                "46:C9:78:16:41:B6",
                "BE:F2:DB:37:1A:8A",
                "2A:2F:3E:B1:C7:A0",
                "6E:4C:1E:F1:8E:E8",
                "A2:97:F2:BA:2A:D5",
                "6A:DD:55:59:2E:68",
                "DA:D2:D1:55:18:60",
                "F2:C5:62:AD:29:04",
            ]),
            model_info: elements(
                0x006f,
                0x17,
                &[0x04, 0x00, 0x08, 0x84, 0x00, 0x00, 0x00, 0x40],
                &[0x00, 0x17, 0xf2, 0x0a, 0x00, 0x01, 0x04],
                Some(0x0f98_79b2),
            ),
            wifi_tx_dbm: 17.0,
            ble_tx_dbm: Some(8.0),
            supports_ftm: true,
        },
        DeviceProfile {
            name: "PinePhone".into(),
            macs: macs(&[
                "7A:26:59:B4:C6:6D",
                "D6:8A:05:6A:62:F5",
                "96:61:D9:88:25:45",
                "7E:53:9C:5F:BE:D0",
                "B6:13:70:3F:28:C9",
                "0A:70:BB:F2:2D:9D",
                "52:A2:3B:BD:6D:DF",
                "D6:DB:E0:37:8C:CE",
                "62:0B:F8:3C:3A:E2",
                "BA:12:FB:78:53:F4",
                "A2:3E:F7:DF:14:03",
                "BE:B6:47:61:BC:31",
                "EA:14:84:75:F9:00",
                "8E:B7:F1:4D:1A:FC",
                "C6:41:5C:E2:C6:7B",
                "92:47:59:89:C4:37",
                "CA:DC:C0:CF:39:FB",
            ]),
            model_info: elements(
                0x1072,
                0x03,
                &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40],
                &[0x00, 0x03, 0x7f, 0x01, 0x01],
                None,
            ),
            wifi_tx_dbm: 12.0,
            ble_tx_dbm: None,
            supports_ftm: false,
        },
    ]
}
