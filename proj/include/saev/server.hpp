#pragma once

// HTTP/JSON service over a read-only artifact session.
//
//   GET  /api/session
//   GET  /api/features?sort={sparsity|max_act}&offset=&limit=
//   GET  /api/features/{id}
//   POST /api/query-patches   {image_id, patch_indices, k}
//   POST /api/intervene       {image_id, edits, scope, patches, head}
//   GET  /api/images/{id}
//   GET  /api/images/{id}/patches/{idx}
//
// Errors are {"code": <http status>, "message": ...}.

#include "saev/exemplar_index.hpp"
#include "saev/intervention.hpp"

#include <map>
#include <memory>
#include <optional>

namespace saev {

struct SessionPaths {
  fs::path sae;
  fs::path index;
  fs::path store;                      // patch activations
  std::optional<fs::path> cls_store;   // one [CLS] row per image
  std::map<std::string, fs::path> heads;
  std::optional<fs::path> image_root;  // holds manifest.json

  // Conventional layout: sae.sae (or the only *.sae), index.idx, store/,
  // cls_store/, heads/*.head, images/.
  static SessionPaths from_dir(const fs::path& dir);
};

struct Session {
  explicit Session(ActivationStore patches) : store(std::move(patches)) {}

  SaeCheckpoint sae;
  std::string sae_digest;
  ExemplarIndex index;
  std::string index_digest;
  ActivationStore store;
  std::optional<ActivationStore> cls_store;
  std::map<std::string, LinearHead> heads;
  std::map<std::string, std::string> head_digests;
  std::optional<fs::path> image_root;
  std::map<std::uint64_t, std::string> images;  // image_id -> file relative to image_root

  static std::shared_ptr<const Session> load(const SessionPaths& paths);
  nlohmann::json describe() const;
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Request routing without a socket; the HTTP layer is a thin wrapper over it.
class Api {
 public:
  void set_session(std::shared_ptr<const Session> session);
  std::shared_ptr<const Session> session() const;

  ApiResponse handle(std::string_view method, std::string_view path,
                     const std::multimap<std::string, std::string>& query, std::string_view body) const;

 private:
  std::shared_ptr<const Session> session_;
};

class Server {
 public:
  Server();
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  Api& api() { return api_; }

  // Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host, int port);
  // Blocks until stop().
  bool listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  Api api_;
  std::unique_ptr<Impl> impl_;
};

// Binary PPM (P6, maxval 255).
struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

std::optional<PpmImage> parse_ppm(std::span<const char> bytes);
std::string encode_ppm(const PpmImage& img);
// Pixel box of patch idx on a grid x grid layout (raster order).
PpmImage crop_patch(const PpmImage& img, int grid, std::uint32_t idx);

}  // namespace saev
