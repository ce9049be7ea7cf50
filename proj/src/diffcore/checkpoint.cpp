#include "avf/diffcore/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace avf::diff {
namespace {

constexpr char kMagic[8] = {'A', 'V', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr int kVersion = 1;

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

void put_u64(std::string& out, std::uint64_t v) {
  v = to_le(v);
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_tensor(std::string& out, const Tensor& t) {
  for (double d : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return to_le(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor(const Shape& shape) {
    Tensor t(shape);
    for (double& d : t.values()) d = std::bit_cast<double>(u64());
    return t;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated payload");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const AdamState* adam,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["version"] = kVersion;
  header["dtype"] = "f64";
  header["rng_seed"] = params.rng_seed();
  header["names"] = nlohmann::json::array();
  header["shapes"] = nlohmann::json::array();
  header["trainable"] = nlohmann::json::array();
  for (const auto& e : params.entries()) {
    header["names"].push_back(e.name);
    header["shapes"].push_back(e.value.shape());
    header["trainable"].push_back(e.trainable);
  }
  if (adam) {
    nlohmann::json a;
    a["beta1"] = adam->beta1;
    a["beta2"] = adam->beta2;
    a["eps"] = adam->eps;
    a["step"] = adam->step;
    a["moments"] = nlohmann::json::array();
    for (const auto& [name, m] : adam->m) a["moments"].push_back(name);
    header["adam"] = a;
  } else {
    header["adam"] = nullptr;
  }
  header["meta"] = meta;

  const std::string head = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, head.size());
  out += head;
  for (const auto& e : params.entries()) put_tensor(out, e.value);
  if (adam) {
    for (const auto& [name, m] : adam->m) {
      put_tensor(out, m);
      put_tensor(out, adam->v.at(name));
    }
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf);
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  r.bytes(8);
  const std::uint64_t head_len = r.u64();
  if (head_len > buf.size()) throw std::runtime_error("checkpoint: header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(static_cast<std::size_t>(head_len)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  }
  try {
    if (header.at("version").get<int>() != kVersion) throw std::runtime_error("checkpoint: unsupported version");
    if (header.at("dtype").get<std::string>() != "f64") throw std::runtime_error("checkpoint: unsupported dtype");
    const auto names = header.at("names").get<std::vector<std::string>>();
    const auto shapes = header.at("shapes").get<std::vector<Shape>>();
    const auto trainable = header.at("trainable").get<std::vector<bool>>();
    if (names.size() != shapes.size() || names.size() != trainable.size()) {
      throw std::runtime_error("checkpoint: header arrays disagree in length");
    }
    Checkpoint ck{ParamStore(header.at("rng_seed").get<std::uint64_t>()), std::nullopt, header.value("meta", nlohmann::json::object())};
    for (std::size_t i = 0; i < names.size(); ++i) ck.params.add(names[i], r.tensor(shapes[i]), trainable[i]);
    if (!header.at("adam").is_null()) {
      const auto& a = header.at("adam");
      AdamState st;
      st.beta1 = a.at("beta1").get<double>();
      st.beta2 = a.at("beta2").get<double>();
      st.eps = a.at("eps").get<double>();
      st.step = a.at("step").get<std::int64_t>();
      for (const auto& name : a.at("moments").get<std::vector<std::string>>()) {
        const Shape& s = ck.params.at(name).shape();
        st.m.emplace(name, r.tensor(s));
        st.v.emplace(name, r.tensor(s));
      }
      ck.adam = std::move(st);
    }
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes after payload");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw std::runtime_error(std::string("checkpoint: inconsistent header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: inconsistent header: ") + e.what());
  }
}

}  // namespace avf::diff
