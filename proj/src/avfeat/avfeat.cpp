#include "avf/avfeat/avfeat.hpp"

#include <fftw3.h>

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

namespace avf::feat {
namespace {

struct PlanDeleter {
  void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};

// Reusable real-to-complex transform of a fixed size.
class RealFft {
 public:
  explicit RealFft(int n)
      : n_(n),
        in_(static_cast<double*>(fftw_malloc(sizeof(double) * static_cast<std::size_t>(n)))),
        out_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(n / 2 + 1)))) {
    if (!in_ || !out_) throw std::bad_alloc();
    plan_.reset(fftw_plan_dft_r2c_1d(n, in_.get(), out_.get(), FFTW_ESTIMATE));
    if (!plan_) throw std::runtime_error("fftw: plan creation failed");
  }

  double* input() { return in_.get(); }
  void execute() { fftw_execute(plan_.get()); }
  std::complex<double> bin(int k) const { return {out_.get()[k][0], out_.get()[k][1]}; }
  int size() const { return n_; }

 private:
  struct Free {
    void operator()(void* p) const { fftw_free(p); }
  };
  int n_;
  std::unique_ptr<double, Free> in_;
  std::unique_ptr<fftw_complex, Free> out_;
  std::unique_ptr<fftw_plan_s, PlanDeleter> plan_;
};

}  // namespace

int StftParams::columns(int n) const {
  const int len = std::max(n, window);
  return (len - window) / hop + 1;
}

void StftParams::validate() const {
  if (window <= 0) throw std::invalid_argument("window: must be positive");
  if (hop <= 0) throw std::invalid_argument("hop: must be positive");
  if (nfft < window || nfft % 2 != 0) throw std::invalid_argument("nfft: must be even and at least window");
}

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

std::vector<std::complex<double>> rfft(std::span<const double> x, int nfft) {
  if (static_cast<int>(x.size()) > nfft) throw std::invalid_argument("nfft: shorter than the input");
  RealFft f(nfft);
  std::fill(f.input(), f.input() + nfft, 0.0);
  std::copy(x.begin(), x.end(), f.input());
  f.execute();
  std::vector<std::complex<double>> out(static_cast<std::size_t>(nfft / 2 + 1));
  for (int k = 0; k <= nfft / 2; ++k) out[static_cast<std::size_t>(k)] = f.bin(k);
  return out;
}

diff::Tensor stft(std::span<const double> wave, const StftParams& p) {
  p.validate();
  if (static_cast<int>(wave.size()) < p.window) {
    throw std::invalid_argument("wave: " + std::to_string(wave.size()) + " samples is shorter than window " +
                                std::to_string(p.window));
  }
  const int cols = p.columns(static_cast<int>(wave.size()));
  const int bins = p.bins();
  const auto w = hann(p.window);
  RealFft f(p.nfft);
  diff::Tensor out({bins, cols});
  for (int c = 0; c < cols; ++c) {
    double* in = f.input();
    const std::size_t start = static_cast<std::size_t>(c) * static_cast<std::size_t>(p.hop);
    for (int n = 0; n < p.nfft; ++n) in[n] = n < p.window ? w[static_cast<std::size_t>(n)] * wave[start + static_cast<std::size_t>(n)] : 0.0;
    f.execute();
    for (int k = 0; k < bins; ++k) {
      const double m = std::abs(f.bin(k));
      out[static_cast<std::size_t>(k * cols + c)] = p.log_magnitude ? std::log1p(m) : m;
    }
  }
  return out;
}

SpectrogramSeq frame_spectrograms(std::span<const double> audio, int frames, int audio_rate, int fps,
                                  const StftParams& p) {
  p.validate();
  if (fps <= 0 || audio_rate % fps != 0) throw std::invalid_argument("audio_rate: must be a multiple of fps");
  const std::size_t S = static_cast<std::size_t>(audio_rate / fps);
  if (audio.size() != S * static_cast<std::size_t>(frames)) {
    throw std::invalid_argument("audio: " + std::to_string(audio.size()) + " samples, expected " +
                                std::to_string(S * static_cast<std::size_t>(frames)));
  }
  SpectrogramSeq seq{{}, p, audio_rate, fps};
  std::vector<double> seg(std::max<std::size_t>(S, static_cast<std::size_t>(p.window)), 0.0);
  for (int i = 0; i < frames; ++i) {
    std::copy_n(audio.begin() + static_cast<std::ptrdiff_t>(S * static_cast<std::size_t>(i)), S, seg.begin());
    seq.blocks.push_back(stft(seg, p));
  }
  return seq;
}

diff::Tensor stack(const SpectrogramSeq& seq) {
  if (seq.blocks.empty()) throw std::invalid_argument("spectrogram: no blocks to stack");
  const diff::Shape& b = seq.blocks.front().shape();
  diff::Tensor out({static_cast<int>(seq.blocks.size()), b[0], b[1]});
  std::size_t at = 0;
  for (const auto& blk : seq.blocks) {
    for (double v : blk.values()) out[at++] = v;
  }
  return out;
}

std::vector<double> position_encode(int pos, int d) {
  if (pos < 0) throw std::invalid_argument("pos: must be non-negative");
  if (d <= 0 || d % 2 != 0) throw std::invalid_argument("d: must be positive and even, got " + std::to_string(d));
  std::vector<double> code(static_cast<std::size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double a = pos / std::pow(10000.0, 2.0 * i / d);
    code[static_cast<std::size_t>(2 * i)] = std::sin(a);
    code[static_cast<std::size_t>(2 * i + 1)] = std::cos(a);
  }
  return code;
}

diff::Tensor position_table(int length, int d) {
  diff::Tensor t({length, d});
  for (int p = 0; p < length; ++p) {
    const auto c = position_encode(p, d);
    std::copy(c.begin(), c.end(), t.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(d));
  }
  return t;
}

void write_block_csv(const std::filesystem::path& path, const diff::Tensor& block) {
  if (block.rank() != 2) throw std::invalid_argument("block: expected rank 2");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f.precision(17);
  for (int r = 0; r < block.dim(0); ++r) {
    for (int c = 0; c < block.dim(1); ++c) {
      if (c) f << ',';
      f << block[static_cast<std::size_t>(r * block.dim(1) + c)];
    }
    f << '\n';
  }
}

}  // namespace avf::feat
