#include "saev/server.hpp"

#include <httplib.h>

#include <atomic>
#include <charconv>
#include <iostream>
#include <thread>

namespace saev {

using json = nlohmann::json;

namespace {

struct HttpError : Error {
  int status;
  HttpError(int s, const std::string& msg) : Error(msg), status(s) {}
};

ApiResponse json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

ApiResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"code", status}, {"message", message}});
}

template <typename T>
std::optional<T> parse_uint(std::string_view s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::vector<std::string_view> split_path(std::string_view path) {
  std::vector<std::string_view> parts;
  while (!path.empty()) {
    if (path.front() == '/') {
      path.remove_prefix(1);
      continue;
    }
    auto slash = path.find('/');
    parts.push_back(path.substr(0, slash));
    if (slash == std::string_view::npos) break;
    path.remove_prefix(slash);
  }
  return parts;
}

std::string content_type_for(const fs::path& p) {
  std::string ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".ppm") return "image/x-portable-pixmap";
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "application/octet-stream";
}

json matrix_rows(const RowMatrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

json head_output_json(const HeadOutput& h) {
  return {{"labels", h.labels}, {"logits", matrix_rows(h.logits)}, {"probs", matrix_rows(h.probs)}};
}

json feature_row(const ExemplarIndex& index, std::uint32_t f) {
  const auto& s = index.summary[f];
  return {{"id", f},
          {"fire_count", s.fire_count},
          {"fire_fraction", index.fire_fraction(f)},
          {"max_activation", s.max_activation}};
}

std::uint64_t require_uint(const json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end()) throw HttpError(400, std::string("missing field '") + key + "'");
  if (!it->is_number_unsigned()) throw HttpError(400, std::string("field '") + key + "' must be a nonnegative integer");
  return it->get<std::uint64_t>();
}

std::vector<std::uint32_t> uint_list(const json& body, const char* key) {
  std::vector<std::uint32_t> out;
  auto it = body.find(key);
  if (it == body.end()) return out;
  if (!it->is_array()) throw HttpError(400, std::string("field '") + key + "' must be an array");
  for (const auto& v : *it) {
    if (!v.is_number_unsigned() || v.get<std::uint64_t>() > std::numeric_limits<std::uint32_t>::max())
      throw HttpError(400, std::string("field '") + key + "' must hold nonnegative integers");
    out.push_back(v.get<std::uint32_t>());
  }
  return out;
}

std::vector<FeatureEdit> edits_from_json(const json& body) {
  auto it = body.find("edits");
  if (it == body.end() || it->is_null()) return {};
  try {
    if (it->is_string()) return parse_edits(it->get<std::string>());
    if (!it->is_array()) throw ArgumentError("edits must be an array or an 'id:mode:value' string");
    std::vector<FeatureEdit> out;
    for (const auto& e : *it) {
      if (!e.is_object() || !e.contains("feature") || !e["feature"].is_number_unsigned())
        throw ArgumentError("each edit needs a nonnegative integer 'feature'");
      FeatureEdit fe;
      fe.feature = e["feature"].get<std::uint32_t>();
      const std::string mode = e.value("mode", std::string("set"));
      auto m = parse_edit_mode(mode);
      if (!m) throw ArgumentError("unknown edit mode '" + mode + "'");
      fe.mode = *m;
      if (!e.contains("value") || !e["value"].is_number()) throw ArgumentError("each edit needs a numeric 'value'");
      fe.value = e["value"].get<float>();
      out.push_back(fe);
    }
    return out;
  } catch (const ArgumentError& e) {
    throw HttpError(422, e.what());
  }
}

}  // namespace

SessionPaths SessionPaths::from_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("artifact directory not found: " + dir.string());
  SessionPaths p;
  p.sae = dir / "sae.sae";
  if (!fs::exists(p.sae)) {
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".sae") found.push_back(e.path());
    if (found.size() != 1) throw IoError("expected sae.sae or exactly one *.sae in " + dir.string());
    p.sae = found.front();
  }
  p.index = dir / "index.idx";
  p.store = dir / "store";
  if (fs::is_directory(dir / "cls_store")) p.cls_store = dir / "cls_store";
  if (fs::is_directory(dir / "heads"))
    for (const auto& e : fs::directory_iterator(dir / "heads"))
      if (e.path().extension() == ".head") p.heads[e.path().stem().string()] = e.path();
  if (fs::is_directory(dir / "images")) p.image_root = dir / "images";
  return p;
}

std::shared_ptr<const Session> Session::load(const SessionPaths& paths) {
  auto s = std::make_shared<Session>(ActivationStore::open(paths.store));
  s->sae = load_checkpoint(paths.sae);
  s->sae_digest = sha256_file(paths.sae);
  s->index = ExemplarIndex::load(paths.index);
  s->index_digest = sha256_file(paths.index);
  if (s->index.n() != static_cast<std::uint32_t>(s->sae.params.n()))
    throw ArgumentError("index has " + std::to_string(s->index.n()) + " features but the SAE has " +
                        std::to_string(s->sae.params.n()));
  if (s->store.d() != static_cast<std::uint32_t>(s->sae.params.d()))
    throw ArgumentError("store dimension does not match the SAE");
  if (paths.cls_store) {
    s->cls_store = ActivationStore::open(*paths.cls_store);
    if (s->cls_store->d() != s->store.d()) throw ArgumentError("cls store dimension does not match the SAE");
  }
  for (const auto& [name, path] : paths.heads) {
    LinearHead h = load_head(path);
    if (h.dim() != s->sae.params.d()) throw ArgumentError("head '" + name + "' dimension does not match the SAE");
    s->heads.emplace(name, std::move(h));
    s->head_digests.emplace(name, sha256_file(path));
  }
  if (paths.image_root) {
    s->image_root = paths.image_root;
    const fs::path mpath = *paths.image_root / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw IoError("cannot open image manifest " + mpath.string());
    json m = json::parse(in, nullptr, false);
    if (m.is_discarded()) throw FormatError("corrupt image manifest " + mpath.string());
    // Either {"images": [{"image_id", "filename"}]} or {"<id>": "<file>"}.
    if (m.contains("images") && m["images"].is_array()) {
      for (const auto& e : m["images"]) {
        if (e.contains("skipped") && e["skipped"].get<bool>()) continue;
        s->images[e.at("image_id").get<std::uint64_t>()] = e.at("filename").get<std::string>();
      }
    } else {
      for (const auto& [k, v] : m.items()) {
        auto id = parse_uint<std::uint64_t>(k);
        if (!id || !v.is_string()) throw FormatError("bad image manifest entry '" + k + "'");
        s->images[*id] = v.get<std::string>();
      }
    }
  }
  return s;
}

json Session::describe() const {
  json heads_json = json::object();
  for (const auto& [name, h] : heads)
    heads_json[name] = {{"kind", to_string(h.kind)}, {"classes", h.classes()}, {"digest", head_digests.at(name)}};
  return {{"sae_digest", sae_digest},
          {"index_digest", index_digest},
          {"store_digest", store.fingerprint()},
          {"d", sae.params.d()},
          {"n", sae.params.n()},
          {"patches_per_image", store.patches_per_image()},
          {"images", store.n_rows() / store.patches_per_image()},
          {"k", index.k},
          {"heads", heads_json},
          {"has_cls_store", cls_store.has_value()},
          {"has_images", image_root.has_value()}};
}

void Api::set_session(std::shared_ptr<const Session> session) { std::atomic_store(&session_, std::move(session)); }

std::shared_ptr<const Session> Api::session() const { return std::atomic_load(&session_); }

namespace {

std::string query_value(const std::multimap<std::string, std::string>& q, const std::string& key,
                        const std::string& fallback) {
  auto it = q.find(key);
  return it == q.end() ? fallback : it->second;
}

ApiResponse features_table(const Session& s, const std::multimap<std::string, std::string>& q) {
  const std::string sort_s = query_value(q, "sort", "sparsity");
  auto sort = parse_feature_sort(sort_s);
  if (!sort) throw HttpError(400, "sort must be 'sparsity' or 'max_act'");
  auto offset = parse_uint<std::size_t>(query_value(q, "offset", "0"));
  auto limit = parse_uint<std::size_t>(query_value(q, "limit", "100"));
  if (!offset || !limit) throw HttpError(400, "offset and limit must be nonnegative integers");
  const auto order = feature_table(s.index, *sort);
  json rows = json::array();
  for (std::size_t i = *offset; i < order.size() && i - *offset < *limit; ++i) rows.push_back(feature_row(s.index, order[i]));
  return json_response(200, {{"sort", sort_s}, {"offset", *offset}, {"total", order.size()}, {"features", rows}});
}

ApiResponse feature_detail(const Session& s, std::string_view id_s) {
  auto id = parse_uint<std::uint32_t>(id_s);
  if (!id || *id >= s.index.n()) throw HttpError(404, "unknown feature '" + std::string(id_s) + "'");
  json body = feature_row(s.index, *id);
  json ex = json::array();
  for (const auto& e : s.index.exemplars[*id])
    ex.push_back({{"image_id", e.ref.image_id}, {"patch_idx", e.ref.patch_idx}, {"activation", e.activation}});
  body["exemplars"] = ex;
  return json_response(200, body);
}

void require_image(const Session& s, std::uint64_t image_id) {
  if (image_id >= s.store.n_rows() / s.store.patches_per_image())
    throw HttpError(404, "unknown image " + std::to_string(image_id));
}

RowMatrix image_patches(const Session& s, std::uint64_t image_id) {
  const std::uint64_t ppi = s.store.patches_per_image();
  return s.store.read_range(image_id * ppi, ppi);
}

json parse_body(std::string_view body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw HttpError(400, "request body must be a JSON object");
  return j;
}

ApiResponse query_patches(const Session& s, std::string_view raw) {
  const json body = parse_body(raw);
  const std::uint64_t image_id = require_uint(body, "image_id");
  require_image(s, image_id);
  const auto idx = uint_list(body, "patch_indices");
  if (idx.empty()) throw HttpError(422, "patch_indices must not be empty");
  const std::size_t k = body.contains("k") ? require_uint(body, "k") : 10;
  const std::uint32_t ppi = s.store.patches_per_image();
  RowMatrix x(static_cast<Eigen::Index>(idx.size()), s.store.d());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ppi) throw HttpError(404, "unknown patch " + std::to_string(idx[i]));
    s.store.read_row(image_id * ppi + idx[i], {x.row(static_cast<Eigen::Index>(i)).data(), s.store.d()});
  }
  json feats = json::array();
  for (const auto& f : query_patch_features(s.sae.params, s.sae.normalizer, x, k)) {
    json row = feature_row(s.index, f.feature);
    row["activation"] = f.activation;
    feats.push_back(std::move(row));
  }
  return json_response(200, {{"image_id", image_id}, {"patch_indices", idx}, {"features", feats}});
}

ApiResponse intervene_endpoint(const Session& s, std::string_view raw) {
  const json body = parse_body(raw);
  const std::uint64_t image_id = require_uint(body, "image_id");
  require_image(s, image_id);

  std::string head_name = body.value("head", std::string());
  if (head_name.empty()) {
    if (s.heads.size() != 1) throw HttpError(422, "specify 'head' (" + std::to_string(s.heads.size()) + " loaded)");
    head_name = s.heads.begin()->first;
  }
  auto hit = s.heads.find(head_name);
  if (hit == s.heads.end()) throw HttpError(404, "unknown head '" + head_name + "'");
  const LinearHead& head = hit->second;

  InterventionRequest req;
  req.head = head_name;
  req.edits = edits_from_json(body);
  const std::string scope_s = body.value("scope", std::string("all"));
  auto scope = parse_scope(scope_s);
  if (!scope) throw HttpError(422, "scope must be 'selected' or 'all'");
  req.scope = *scope;
  req.patches = uint_list(body, "patches");

  RowMatrix x;
  if (head.kind == HeadKind::Classification) {
    // The classifier reads one [CLS] vector; edits apply to that row.
    if (s.cls_store) {
      if (image_id >= s.cls_store->n_rows()) throw HttpError(404, "no [CLS] row for image " + std::to_string(image_id));
      x = s.cls_store->read_range(image_id, 1);
    } else if (s.store.patches_per_image() == 1) {
      x = image_patches(s, image_id);
    } else {
      throw HttpError(422, "classification head needs a [CLS] store");
    }
    req.scope = Scope::All;
    req.patches.clear();
  } else {
    x = image_patches(s, image_id);
    for (auto p : req.patches)
      if (p >= s.store.patches_per_image()) throw HttpError(404, "unknown patch " + std::to_string(p));
  }

  InterventionResult r;
  try {
    validate_edits(req.edits, s.sae.params.n());
    r = run_intervention(s.sae.params, s.sae.normalizer, head, x, req);
  } catch (const ArgumentError& e) {
    throw HttpError(422, e.what());
  }

  json patches = json::array();
  for (const auto& p : r.patches) {
    json delta = json::array();
    for (const auto& fv : p.code_delta) delta.push_back(json::array({fv.feature, fv.value}));
    patches.push_back({{"patch", p.patch}, {"code_delta", delta}, {"recon_error_norm", p.recon_error_norm}});
  }
  json edits = json::array();
  for (const auto& e : req.edits) edits.push_back({{"feature", e.feature}, {"mode", to_string(e.mode)}, {"value", e.value}});
  return json_response(200, {{"image_id", image_id},
                             {"head", head_name},
                             {"kind", to_string(head.kind)},
                             {"scope", req.scope == Scope::All ? "all" : "selected"},
                             {"edits", edits},
                             {"before", head_output_json(r.before)},
                             {"after", head_output_json(r.after)},
                             {"diff", {{"changed", r.changed}}},
                             {"patches", patches}});
}

fs::path image_file(const Session& s, std::string_view id_s) {
  if (!s.image_root) throw HttpError(404, "no image root loaded");
  auto id = parse_uint<std::uint64_t>(id_s);
  if (!id) throw HttpError(404, "unknown image '" + std::string(id_s) + "'");
  auto it = s.images.find(*id);
  if (it == s.images.end()) throw HttpError(404, "unknown image " + std::to_string(*id));
  return *s.image_root / it->second;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw HttpError(404, "image file missing: " + p.filename().string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ApiResponse image_endpoint(const Session& s, std::string_view id_s) {
  const fs::path path = image_file(s, id_s);
  return {200, content_type_for(path), read_bytes(path)};
}

ApiResponse patch_image_endpoint(const Session& s, std::string_view id_s, std::string_view idx_s) {
  const fs::path path = image_file(s, id_s);
  auto idx = parse_uint<std::uint32_t>(idx_s);
  const std::uint32_t ppi = s.store.patches_per_image();
  if (!idx || *idx >= ppi) throw HttpError(404, "unknown patch '" + std::string(idx_s) + "'");
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(ppi))));
  if (static_cast<std::uint32_t>(grid * grid) != ppi) throw HttpError(415, "patches do not form a square grid");
  if (content_type_for(path) != "image/x-portable-pixmap")
    throw HttpError(415, "patch crops are only available for PPM images");
  const std::string bytes = read_bytes(path);
  auto img = parse_ppm(bytes);
  if (!img) throw HttpError(415, "unreadable PPM image");
  return {200, "image/x-portable-pixmap", encode_ppm(crop_patch(*img, grid, *idx))};
}

}  // namespace

ApiResponse Api::handle(std::string_view method, std::string_view path,
                        const std::multimap<std::string, std::string>& query, std::string_view body) const {
  const auto parts = split_path(path);
  if (parts.size() < 2 || parts[0] != "api") return error_response(404, "no such endpoint");
  const bool get = method == "GET", post = method == "POST";
  const auto s = session();
  try {
    auto need = [&]() -> const Session& {
      if (!s) throw HttpError(503, "artifacts not loaded");
      return *s;
    };
    const auto& r = parts[1];
    if (r == "session" && parts.size() == 2 && get) return json_response(200, need().describe());
    if (r == "features" && get) {
      if (parts.size() == 2) return features_table(need(), query);
      if (parts.size() == 3) return feature_detail(need(), parts[2]);
    }
    if (r == "query-patches" && parts.size() == 2 && post) return query_patches(need(), body);
    if (r == "intervene" && parts.size() == 2 && post) return intervene_endpoint(need(), body);
    if (r == "images" && get) {
      if (parts.size() == 3) return image_endpoint(need(), parts[2]);
      if (parts.size() == 5 && parts[3] == "patches") return patch_image_endpoint(need(), parts[2], parts[4]);
    }
    return error_response(404, "no such endpoint");
  } catch (const HttpError& e) {
    return error_response(e.status, e.what());
  } catch (const ArgumentError& e) {
    return error_response(422, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

struct Server::Impl {
  httplib::Server http;
  std::thread thread;
};

Server::Server() : impl_(std::make_unique<Impl>()) {
  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::multimap<std::string, std::string> q(req.params.begin(), req.params.end());
    const ApiResponse r = api_.handle(req.method, req.path, q, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  impl_->http.Get(R"(/.*)", dispatch);
  impl_->http.Post(R"(/.*)", dispatch);
}

Server::~Server() { stop(); }

int Server::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->http.bind_to_any_port(host);
  } else if (!impl_->http.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return bound;
}

bool Server::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }

void Server::stop() {
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

// PPM -------------------------------------------------------------------------

std::optional<PpmImage> parse_ppm(std::span<const char> bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::optional<int> {
    skip_ws();
    int v = 0;
    auto [p, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
    if (ec != std::errc() || v <= 0) return std::nullopt;
    pos = static_cast<std::size_t>(p - bytes.data());
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') return std::nullopt;
  pos = 2;
  auto w = number(), h = number(), maxval = number();
  if (!w || !h || !maxval || *maxval != 255) return std::nullopt;
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) return std::nullopt;
  ++pos;
  const std::size_t need = static_cast<std::size_t>(*w) * static_cast<std::size_t>(*h) * 3;
  if (bytes.size() - pos < need) return std::nullopt;
  PpmImage img{*w, *h, {}};
  img.rgb.assign(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos),
                 reinterpret_cast<const std::uint8_t*>(bytes.data() + pos + need));
  return img;
}

std::string encode_ppm(const PpmImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

PpmImage crop_patch(const PpmImage& img, int grid, std::uint32_t idx) {
  if (grid <= 0 || idx >= static_cast<std::uint32_t>(grid * grid)) throw ArgumentError("crop_patch: patch out of range");
  const int r = static_cast<int>(idx) / grid, c = static_cast<int>(idx) % grid;
  const int y0 = r * img.height / grid, y1 = (r + 1) * img.height / grid;
  const int x0 = c * img.width / grid, x1 = (c + 1) * img.width / grid;
  PpmImage out{x1 - x0, y1 - y0, {}};
  out.rgb.reserve(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = y0; y < y1; ++y) {
    const auto* row = img.rgb.data() + (static_cast<std::size_t>(y) * img.width + x0) * 3;
    out.rgb.insert(out.rgb.end(), row, row + static_cast<std::size_t>(out.width) * 3);
  }
  return out;
}

}  // namespace saev
