//! Audio front end: WAV I/O, log-mel features and the frozen speech encoder.

mod encoder;
mod features;
mod wav;

pub use encoder::{
    build_encoder, encoder_backends, EncoderBackend, EncoderConfig, EncoderStates, SpeechEncoder, ToyEncoder,
};
pub use features::{
    extract_features, frame_samples, hann, mel_filterbank, FeatureExtractor, MelConfig, MelFeatures, Waveform,
};
pub use wav::{read_wav, write_wav};
