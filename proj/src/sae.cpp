#include "saev/sae.hpp"

namespace saev {

using json = nlohmann::json;

std::vector<FeatureValue> nonzeros(const Eigen::Ref<const Eigen::VectorXf>& code) {
  std::vector<FeatureValue> out;
  for (Eigen::Index i = 0; i < code.size(); ++i)
    if (code[i] != 0.0f) out.push_back({static_cast<std::uint32_t>(i), code[i]});
  return out;
}

SaeParams init_params(int d, int n, const Normalizer& normalizer, std::uint64_t seed) {
  if (d < 1 || n < 1) throw ArgumentError("init_params: d and n must be >= 1");
  if (normalizer.mu.size() != d) throw ArgumentError("init_params: normalizer dimension mismatch");
  std::mt19937_64 rng(seed);
  SaeParams p;
  const float enc_bound = 1.0f / std::sqrt(static_cast<float>(d));
  const float dec_bound = 1.0f / std::sqrt(static_cast<float>(n));
  std::uniform_real_distribution<float> enc_dist(-enc_bound, enc_bound);
  std::uniform_real_distribution<float> dec_dist(-dec_bound, dec_bound);

  p.w_enc.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) p.w_enc(i, j) = enc_dist(rng);
  p.w_dec.resize(d, n);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < n; ++j) p.w_dec(i, j) = dec_dist(rng);
  for (int j = 0; j < n; ++j) {
    double norm = p.w_dec.col(j).cast<double>().norm();
    if (norm < 1e-12) {
      // Measure-zero event; fall back to a basis direction.
      p.w_dec.col(j).setZero();
      p.w_dec(j % d, j) = 1.0f;
      norm = 1.0;
    }
    p.w_dec.col(j) = (p.w_dec.col(j).cast<double>() / norm).cast<float>();
  }
  p.b_enc = Eigen::VectorXf::Zero(n);
  p.b_dec = normalizer.mu;
  return p;
}

std::string serialize_checkpoint(const SaeCheckpoint& ckpt) {
  const auto& p = ckpt.params;
  if (ckpt.normalizer.mu.size() != p.d()) throw ArgumentError("checkpoint: normalizer dimension mismatch");
  std::string out;
  auto put = [&out](const void* data, std::size_t n) { out.append(static_cast<const char*>(data), n); };
  auto put_mat = [&](const Eigen::MatrixXf& m) {
    const RowMatrix rm = m;
    put(rm.data(), static_cast<std::size_t>(rm.size()) * sizeof(float));
  };
  auto put_vec = [&](const Eigen::VectorXf& v) { put(v.data(), static_cast<std::size_t>(v.size()) * sizeof(float)); };

  put(kSaeMagic, sizeof(kSaeMagic));
  const std::uint32_t header[3] = {kSaeVersion, static_cast<std::uint32_t>(p.d()), static_cast<std::uint32_t>(p.n())};
  put(header, sizeof(header));
  put_mat(p.w_enc);
  put_vec(p.b_enc);
  put_mat(p.w_dec);
  put_vec(p.b_dec);
  put_vec(ckpt.normalizer.mu);

  json trailer = ckpt.config;
  trailer["normalizer"] = {{"eps", ckpt.normalizer.eps}, {"sample_count", ckpt.normalizer.sample_count}};
  out += trailer.dump();
  return out;
}

SaeCheckpoint parse_checkpoint(std::span<const char> bytes, const std::string& context) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSaeMagic, 8) != 0) throw FormatError(context + ": bad magic");
  detail::ByteReader in(bytes.subspan(8), context);
  const auto version = in.get<std::uint32_t>();
  if (version != kSaeVersion) throw FormatError(context + ": unsupported version " + std::to_string(version));
  const auto d = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  const auto n = static_cast<Eigen::Index>(in.get<std::uint32_t>());
  if (d == 0 || n == 0) throw FormatError(context + ": zero dimension");
  const std::size_t floats = static_cast<std::size_t>(2 * n * d + n + 2 * d);
  if (in.remaining() < floats * sizeof(float)) throw FormatError(context + ": truncated file");

  SaeCheckpoint ckpt;
  auto& p = ckpt.params;
  RowMatrix enc(n, d), dec(d, n);
  in.get_floats({enc.data(), static_cast<std::size_t>(enc.size())});
  p.w_enc = enc;
  p.b_enc.resize(n);
  in.get_floats({p.b_enc.data(), static_cast<std::size_t>(n)});
  in.get_floats({dec.data(), static_cast<std::size_t>(dec.size())});
  p.w_dec = dec;
  p.b_dec.resize(d);
  in.get_floats({p.b_dec.data(), static_cast<std::size_t>(d)});
  ckpt.normalizer.mu.resize(d);
  in.get_floats({ckpt.normalizer.mu.data(), static_cast<std::size_t>(d)});

  const auto rest = in.rest();
  json trailer = json::parse(rest.begin(), rest.end(), nullptr, false);
  if (trailer.is_discarded() || !trailer.is_object()) throw FormatError(context + ": corrupt or truncated JSON trailer");
  if (trailer.contains("normalizer")) {
    ckpt.normalizer.eps = trailer["normalizer"].value("eps", Normalizer::kDefaultEps);
    ckpt.normalizer.sample_count = trailer["normalizer"].value("sample_count", std::uint64_t{0});
    trailer.erase("normalizer");
  }
  ckpt.config = std::move(trailer);
  return ckpt;
}

void save_checkpoint(const fs::path& path, const SaeCheckpoint& ckpt) {
  detail::BinaryWriter w(path);
  w.put_bytes(serialize_checkpoint(ckpt));
  w.close();
}

SaeCheckpoint load_checkpoint(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  return parse_checkpoint(bytes, path.filename().string());
}

}  // namespace saev
