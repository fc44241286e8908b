#include "prism/training/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "prism/common/error.hpp"

namespace prism::train {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'I', 'S', 'M', 'V', 'Q', '\0'};
constexpr std::uint32_t kVersion = 1;

class Out {
 public:
  explicit Out(const std::string& path) : path_(path), f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw io_error("cannot write checkpoint " + path);
  }
  template <typename T>
  void pod(const T& v) {
    f_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    f_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void vec(const std::vector<T>& v) {
    pod<std::uint64_t>(v.size());
    f_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  void raw(const char* p, std::size_t n) { f_.write(p, static_cast<std::streamsize>(n)); }
  void close() {
    f_.close();
    if (!f_) throw io_error("failed writing checkpoint " + path_);
  }

 private:
  std::string path_;
  std::ofstream f_;
};

class In {
 public:
  explicit In(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw io_error("cannot open checkpoint " + path);
  }
  template <typename T>
  T pod() {
    T v{};
    f_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f_) fail("truncated file");
    return v;
  }
  std::uint64_t count(std::uint64_t limit = (1ull << 34)) {
    const auto n = pod<std::uint64_t>();
    if (n > limit) fail("implausible length " + std::to_string(n));
    return n;
  }
  std::string str() {
    std::string s(count(), '\0');
    f_.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!f_) fail("truncated string");
    return s;
  }
  template <typename T>
  std::vector<T> vec() {
    std::vector<T> v(count());
    f_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!f_) fail("truncated array");
    return v;
  }
  void raw(char* p, std::size_t n) {
    f_.read(p, static_cast<std::streamsize>(n));
    if (!f_) fail("truncated header");
  }
  [[noreturn]] void fail(const std::string& why) { throw data_error("checkpoint " + path_ + ": " + why); }

 private:
  std::string path_;
  std::ifstream f_;
};

}  // namespace

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  Out out(path);
  out.raw(kMagic, sizeof(kMagic));
  out.pod(kVersion);
  out.pod(c.stage);
  out.pod(c.epoch);
  out.pod(c.seed);
  out.pod(c.features);
  out.pod(c.priors);
  out.str(c.config_text);
  out.str(c.rng_state);
  out.vec(c.history);
  out.pod<std::uint64_t>(c.tensors.size());
  for (const auto& t : c.tensors) {
    out.str(t.name);
    std::vector<std::uint64_t> dims(t.shape.begin(), t.shape.end());
    out.vec(dims);
    out.vec(t.values);
  }
  out.vec(c.codebook_usage);
  out.vec(c.codebook_streak);
  out.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  In in(path);
  char magic[sizeof(kMagic)];
  in.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) in.fail("bad magic, not a checkpoint");
  const auto version = in.pod<std::uint32_t>();
  if (version != kVersion) in.fail("unsupported version " + std::to_string(version));
  Checkpoint c;
  c.stage = in.pod<std::uint32_t>();
  c.epoch = in.pod<std::uint32_t>();
  c.seed = in.pod<std::uint64_t>();
  c.features = in.pod<std::uint64_t>();
  c.priors = in.pod<std::uint64_t>();
  c.config_text = in.str();
  c.rng_state = in.str();
  c.history = in.vec<double>();
  const auto n = in.count(1u << 20);
  for (std::uint64_t k = 0; k < n; ++k) {
    TensorRecord t;
    t.name = in.str();
    const auto dims = in.vec<std::uint64_t>();
    t.shape.assign(dims.begin(), dims.end());
    t.values = in.vec<double>();
    if (ad::shape_numel(t.shape) != t.values.size()) in.fail("tensor " + t.name + " size does not match its shape");
    c.tensors.push_back(std::move(t));
  }
  c.codebook_usage = in.vec<double>();
  c.codebook_streak = in.vec<std::uint32_t>();
  return c;
}

std::vector<TensorRecord> capture(const nn::Params& params) {
  std::vector<TensorRecord> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())});
  }
  return out;
}

void restore(const std::vector<TensorRecord>& records, const nn::Params& params) {
  for (auto p : params) {
    const TensorRecord* rec = nullptr;
    for (const auto& r : records) {
      if (r.name == p.name) {
        rec = &r;
        break;
      }
    }
    if (rec == nullptr) throw data_error("checkpoint has no tensor named " + p.name);
    if (rec->shape != p.tensor.shape()) {
      throw data_error("checkpoint tensor " + p.name + " has shape " + ad::shape_to_string(rec->shape) +
                       ", model expects " + ad::shape_to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<ad::Real>(rec->values[i]);
  }
}

std::uint64_t parameter_hash(const nn::Params& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    for (auto d : p.tensor.shape()) {
      const std::uint64_t v = d;
      mix(&v, sizeof(v));
    }
    const auto values = p.tensor.values();
    mix(values.data(), values.size() * sizeof(ad::Real));
  }
  return h;
}

}  // namespace prism::train
