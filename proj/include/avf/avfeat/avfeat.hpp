#pragma once

#include <complex>
#include <filesystem>
#include <span>
#include <vector>

#include "avf/common/json_fields.hpp"

#include "avf/diffcore/tensor.hpp"

namespace avf::feat {

struct StftParams {
  int window = 256;
  int hop = 64;
  int nfft = 256;
  bool log_magnitude = false;  // log(1 + |X|) when set

  int bins() const { return nfft / 2; }
  /// Columns produced for a segment of n samples (after tail padding to one window).
  int columns(int n) const;
  void validate() const;
};

AVF_JSON_FIELDS(StftParams, window, hop, nfft, log_magnitude)

/// Periodic Hann window of length n.
std::vector<double> hann(int n);

/// One-sided spectrum (nfft/2 + 1 bins) of x zero-padded to nfft.
std::vector<std::complex<double>> rfft(std::span<const double> x, int nfft);

/// Hann-windowed magnitude STFT, shape [nfft/2, columns]; the Nyquist bin is dropped.
diff::Tensor stft(std::span<const double> wave, const StftParams& p);

struct SpectrogramSeq {
  std::vector<diff::Tensor> blocks;  // one [bins, columns] block per video frame
  StftParams params;
  int audio_rate = 0;
  int fps = 0;
};

/// Block i is the STFT of samples [i*S, (i+1)*S), S = audio_rate / fps.
SpectrogramSeq frame_spectrograms(std::span<const double> audio, int frames, int audio_rate, int fps,
                                  const StftParams& p);

/// Stacks blocks into [T, bins, columns].
diff::Tensor stack(const SpectrogramSeq& seq);

/// Sinusoidal code: entry 2i = sin(pos / 10000^(2i/d)), entry 2i+1 = cos of the same.
std::vector<double> position_encode(int pos, int d);
/// Rows 0..length-1 of position_encode, shape [length, d].
diff::Tensor position_table(int length, int d);

void write_block_csv(const std::filesystem::path& path, const diff::Tensor& block);

}  // namespace avf::feat
