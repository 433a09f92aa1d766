#include "cli.hpp"

#include "saev/exemplar_index.hpp"
#include "saev/intervention.hpp"
#include "saev/server.hpp"
#include "saev/synth.hpp"
#include "saev/task_heads.hpp"
#include "saev/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

namespace saev {

using json = nlohmann::json;

namespace {

std::string fixed8(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.8f", v);
  return buf;
}

std::vector<float> parse_floats(const std::string& s) {
  std::vector<float> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    float v = 0;
    try {
      v = std::stof(item, &used);
    } catch (const std::exception&) {
      throw ArgumentError("not a number: '" + item + "'");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) throw ArgumentError("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

// Rows separated by ';', values by ','.
RowMatrix parse_rows(const std::string& s) {
  std::vector<std::vector<float>> rows;
  std::stringstream ss(s);
  std::string row;
  while (std::getline(ss, row, ';')) rows.push_back(parse_floats(row));
  if (rows.empty() || rows.front().empty()) throw ArgumentError("--x: no values");
  RowMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ArgumentError("--x: ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

std::vector<std::uint32_t> parse_ids(const std::string& s) {
  std::vector<std::uint32_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ArgumentError("bad patch index '" + item + "'");
    out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
  }
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid JSON in " + p.string());
  return j;
}

// A JSON int array, or an object holding one under "labels".
std::vector<std::int32_t> read_labels(const fs::path& p) {
  json j = read_json(p);
  if (j.is_object() && j.contains("labels")) j = j["labels"];
  if (!j.is_array()) throw FormatError(p.string() + ": expected an array of labels");
  return j.get<std::vector<std::int32_t>>();
}

RowMatrix read_all(const ActivationStore& store) { return store.read_range(0, store.n_rows()); }

std::string matrix_json(const RowMatrix& m) {
  std::string s = "[";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    s += i ? ", [" : "[";
    for (Eigen::Index j = 0; j < m.cols(); ++j) s += (j ? ", " : "") + fixed8(m(i, j));
    s += "]";
  }
  return s + "]";
}

int infer_classes(std::span<const std::int32_t> labels) {
  std::int32_t mx = -1;
  for (auto l : labels) mx = std::max(mx, l);
  return mx + 1;
}

struct SynthArgs {
  std::string out;
  int d = 64, n_true = 64, k = 3;
  double sigma = 0.01;
  std::uint64_t count = 200000, seed = 0, rows_per_shard = 1 << 16;
  std::uint32_t planted_feature = 0;
  double planted_rate = -1.0;
  std::uint64_t seg_images = 0;
  int grid = 4;
  std::uint32_t region_feature = 1;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  WorldOptions wo;
  wo.planted_feature = a.planted_feature;
  wo.planted_rate = a.planted_rate;
  const PlantedWorld world = gen_world(a.d, a.n_true, a.k, a.sigma, a.seed, wo);
  const fs::path dir = a.out;
  json summary = {{"out", a.out}, {"d", a.d}, {"n_true", a.n_true}, {"coherence", max_coherence(world.dictionary)}};
  if (a.seg_images > 0) {
    SegWorldOptions so;
    so.grid = a.grid;
    so.region_feature = a.region_feature;
    const SegSamples seg = gen_seg_samples(world, a.seg_images, so);
    fs::create_directories(dir);
    write_shard(dir / "shard_00000.bin", seg.patches, static_cast<std::uint32_t>(a.grid * a.grid),
                ShardMeta{"synthetic", 0, "planted-segmentation", 0, 0});
    std::ofstream lf(dir / "labels.json");
    lf << json{{"grid", a.grid}, {"labels", seg.labels}}.dump();
    std::ofstream wf(dir / "ground_truth.json");
    wf << json{{"world", world_to_json(world)}, {"region_feature", a.region_feature}}.dump();
    if (!lf || !wf) throw IoError("cannot write ground truth under " + dir.string());
    summary["images"] = a.seg_images;
    summary["rows"] = seg.patches.rows();
  } else {
    SampleFileOptions so;
    so.rows_per_shard = a.rows_per_shard;
    write_samples(world, a.count, dir, so);
    summary["rows"] = a.count;
  }
  out << summary.dump() << "\n";
  return 0;
}

struct TrainArgs {
  std::string store, out;
  std::vector<int> width{24576};
  std::vector<double> l1{8e-4};
  std::vector<double> lr{1e-3};
  std::size_t batch = 16384;
  std::uint64_t total = 100'000'000, seed = 0, normalizer_samples = Normalizer::kDefaultSampleCount;
  std::int64_t warmup = 500, log_every = 100;
  unsigned threads = 0;
  bool dry_run = false;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<TrainConfig> configs;
  for (int w : a.width)
    for (double l : a.l1)
      for (double r : a.lr) {
        TrainConfig c;
        c.width = w;
        c.lambda_max = l;
        c.lr_max = r;
        c.lambda_warmup = c.lr_warmup = a.warmup;
        c.batch_size = a.batch;
        c.total_activations = a.total;
        c.seed = a.seed;
        c.validate();
        configs.push_back(c);
      }
  json echo = json::array();
  for (const auto& c : configs) {
    json j = c.to_json();
    j["total_steps"] = c.total_steps();
    echo.push_back(j);
  }
  if (a.dry_run) {
    out << json{{"configs", echo}}.dump() << "\n";
    return 0;
  }
  if (a.store.empty() || a.out.empty()) throw ArgumentError("train needs --store and --out (or --dry-run)");
  const ActivationStore store = ActivationStore::open(a.store);
  TrainOptions opts;
  opts.log_every = a.log_every;
  opts.normalizer_samples = a.normalizer_samples;
  opts.threads = a.threads;
  opts.output_dir = fs::path(a.out);
  err << "training " << configs.size() << " config(s) on " << store.n_rows() << " rows\n";
  const auto results = train(store, configs, opts);
  json runs = json::array();
  for (const auto& r : results) {
    const auto& last = r.trace.back();
    runs.push_back({{"name", r.config.name},
                    {"checkpoint", (fs::path(a.out) / (r.config.name + ".sae")).string()},
                    {"final", last.to_json()}});
  }
  out << json{{"configs", echo}, {"runs", runs}}.dump() << "\n";
  return 0;
}

struct IndexArgs {
  std::string store, sae, out;
  std::uint32_t k = 128;
  unsigned threads = 0;
};

int run_index(const IndexArgs& a, std::ostream& out) {
  const ActivationStore store = ActivationStore::open(a.store);
  const SaeCheckpoint ckpt = load_checkpoint(a.sae);
  IndexOptions o;
  o.k = a.k;
  o.threads = a.threads;
  ExemplarIndex idx = build_index(store, ckpt.params, ckpt.normalizer, o);
  idx.provenance.checkpoint_digest = sha256_file(a.sae);
  idx.save(a.out);
  std::uint32_t dead = 0;
  for (const auto& s : idx.summary) dead += s.fire_count == 0;
  out << json{{"out", a.out},      {"n", idx.n()},
              {"k", idx.k},        {"total_patches", idx.total_patches},
              {"dead", dead},      {"index_digest", sha256_file(a.out)}}
             .dump()
      << "\n";
  return 0;
}

struct HeadArgs {
  std::string store, labels, out;
  int classes = 0;
  int epochs = -1;
  std::size_t batch = 0;
  double lr = -1, wd = -1;
  std::uint64_t seed = 0;
};

int run_head(const HeadArgs& a, HeadKind kind, std::ostream& out) {
  const ActivationStore store = ActivationStore::open(a.store);
  const RowMatrix x = read_all(store);
  const auto labels = read_labels(a.labels);
  if (labels.size() != static_cast<std::size_t>(x.rows()))
    throw ArgumentError("label count " + std::to_string(labels.size()) + " does not match " +
                        std::to_string(x.rows()) + " store rows");
  HeadTrainConfig cfg = kind == HeadKind::Classification ? HeadTrainConfig::classification()
                                                         : HeadTrainConfig::segmentation();
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.batch > 0) cfg.batch_size = a.batch;
  if (a.lr >= 0) cfg.lr = a.lr;
  if (a.wd >= 0) cfg.weight_decay = a.wd;
  cfg.seed = a.seed;
  const int classes = a.classes > 0 ? a.classes : infer_classes(labels);
  auto [head, report] = kind == HeadKind::Classification ? train_cls_head(x, labels, classes, cfg)
                                                         : train_seg_head(x, labels, classes, cfg);
  save_head(a.out, head);
  out << json{{"out", a.out},
              {"kind", to_string(kind)},
              {"classes", classes},
              {"config", cfg.to_json()},
              {"final_loss", report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back()},
              {"train_accuracy", report.train_accuracy}}
             .dump()
      << "\n";
  return 0;
}

struct InterveneArgs {
  std::string sae, x, store, edits, scope = "all", patches, head;
  std::uint64_t image_id = 0;
  bool raw = false;
};

int run_intervene(const InterveneArgs& a, bool have_image, std::ostream& out) {
  const SaeCheckpoint ckpt = load_checkpoint(a.sae);
  RowMatrix x;
  if (!a.x.empty()) {
    x = parse_rows(a.x);
  } else {
    if (a.store.empty() || !have_image) throw ArgumentError("intervene needs --x or --store with --image-id");
    const ActivationStore store = ActivationStore::open(a.store);
    const std::uint64_t ppi = store.patches_per_image();
    if (a.image_id >= store.n_rows() / ppi) throw ArgumentError("unknown image " + std::to_string(a.image_id));
    x = store.read_range(a.image_id * ppi, ppi);
  }
  const auto edits = parse_edits(a.edits);
  validate_edits(edits, ckpt.params.n());
  auto scope = parse_scope(a.scope);
  if (!scope) throw ArgumentError("--scope must be 'selected' or 'all'");
  const auto selection = parse_ids(a.patches);
  InterventionOptions io;
  io.normalize = !a.raw;

  std::string body = "{\"x_prime\": ";
  if (a.head.empty()) {
    const InterventionOutput r = intervene(ckpt.params, ckpt.normalizer, x, edits, *scope, selection, io);
    body += matrix_json(r.activations);
  } else {
    const LinearHead head = load_head(a.head);
    InterventionRequest req{edits, *scope, selection, a.head};
    const InterventionResult r = run_intervention(ckpt.params, ckpt.normalizer, head, x, req, io);
    body += matrix_json(r.edited);
    body += ", \"before\": " + json(r.before.labels).dump();
    body += ", \"after\": " + json(r.after.labels).dump();
    body += ", \"changed\": " + json(r.changed).dump();
  }
  out << body << "}\n";
  return 0;
}

struct MiouArgs {
  std::string pred, gt, head, store, labels;
  int classes = 0;
  int ignore = kIgnoreLabel;
  int patch_px = 1;
};

int run_miou(const MiouArgs& a, std::ostream& out) {
  std::vector<std::int32_t> pred, gt;
  int classes = a.classes;
  if (!a.head.empty()) {
    if (a.store.empty() || a.labels.empty()) throw ArgumentError("eval miou with --head needs --store and --labels");
    const LinearHead head = load_head(a.head);
    const ActivationStore store = ActivationStore::open(a.store);
    const auto labels = read_labels(a.labels);
    const std::uint32_t ppi = store.patches_per_image();
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(ppi))));
    if (static_cast<std::uint32_t>(grid * grid) != ppi) throw ArgumentError("patches do not form a square grid");
    if (labels.size() != store.n_rows()) throw ArgumentError("label count does not match store rows");
    if (classes <= 0) classes = head.classes();
    for (std::uint64_t img = 0; img < store.n_rows() / ppi; ++img) {
      const SegPrediction p = predict_seg(head, store.read_range(img * ppi, ppi), grid);
      std::span<const std::int32_t> g(labels.data() + img * ppi, ppi);
      if (a.patch_px > 1) {
        const int px = grid * a.patch_px;
        auto up = upsample_logits_argmax(p, px, px);
        auto gu = upsample_replicate(g, grid, a.patch_px);
        pred.insert(pred.end(), up.begin(), up.end());
        gt.insert(gt.end(), gu.begin(), gu.end());
      } else {
        pred.insert(pred.end(), p.labels.begin(), p.labels.end());
        gt.insert(gt.end(), g.begin(), g.end());
      }
    }
  } else {
    if (a.pred.empty() || a.gt.empty()) throw ArgumentError("eval miou needs --pred and --gt (or --head)");
    pred = read_labels(a.pred);
    gt = read_labels(a.gt);
    if (classes <= 0) classes = std::max(infer_classes(pred), infer_classes(gt));
  }
  const auto m = miou(pred, gt, classes, a.ignore);
  out << json{{"miou", m ? json(*m) : json(nullptr)}, {"classes", classes}, {"pixels", gt.size()}}.dump() << "\n";
  return 0;
}

struct ServeArgs {
  std::string artifacts, sae, index, store, cls_store, images, host = "127.0.0.1";
  std::vector<std::string> heads;
  int port = 8080;
};

int run_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  std::string root = a.artifacts;
  if (root.empty())
    if (const char* env = std::getenv("SAEV_ARTIFACT_DIR")) root = env;
  SessionPaths paths;
  if (!root.empty()) paths = SessionPaths::from_dir(root);
  if (!a.sae.empty()) paths.sae = a.sae;
  if (!a.index.empty()) paths.index = a.index;
  if (!a.store.empty()) paths.store = a.store;
  if (!a.cls_store.empty()) paths.cls_store = fs::path(a.cls_store);
  if (!a.images.empty()) paths.image_root = fs::path(a.images);
  for (const auto& h : a.heads) {
    auto eq = h.find('=');
    if (eq == std::string::npos) throw ArgumentError("--head expects name=path");
    paths.heads[h.substr(0, eq)] = h.substr(eq + 1);
  }
  if (paths.sae.empty() || paths.index.empty() || paths.store.empty())
    throw ArgumentError("serve needs --artifacts, SAEV_ARTIFACT_DIR, or --sae/--index/--store");

  Server server;
  auto session = Session::load(paths);
  const json info = session->describe();
  err << "sae " << paths.sae.string() << " sha256 " << session->sae_digest << "\n";
  err << "index " << paths.index.string() << " sha256 " << session->index_digest << "\n";
  err << "store " << paths.store.string() << " fingerprint " << info["store_digest"].get<std::string>() << "\n";
  for (const auto& [name, digest] : session->head_digests) err << "head " << name << " sha256 " << digest << "\n";
  server.api().set_session(std::move(session));
  out << json{{"host", a.host}, {"port", a.port}, {"session", info}}.dump() << "\n" << std::flush;
  if (!server.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse autoencoder tooling for vision transformer activations", "saev"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a planted-dictionary dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--d", sa.d, "Activation dimension");
  synth->add_option("--n-true", sa.n_true, "Dictionary atoms");
  synth->add_option("--k", sa.k, "Active atoms per sample");
  synth->add_option("--sigma", sa.sigma, "Gaussian noise std");
  synth->add_option("--count", sa.count, "Samples");
  synth->add_option("--seed", sa.seed);
  synth->add_option("--rows-per-shard", sa.rows_per_shard);
  synth->add_option("--planted-feature", sa.planted_feature, "Atom defining class 1");
  synth->add_option("--planted-rate", sa.planted_rate, "Force the planted atom with this probability");
  synth->add_option("--seg-images", sa.seg_images, "Write a segmentation world with this many images instead");
  synth->add_option("--grid", sa.grid, "Patch grid side for --seg-images");
  synth->add_option("--region-feature", sa.region_feature, "Atom carried by region patches");

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train one SAE per (width, l1, lr) combination");
  trainc->add_option("--store", ta.store, "Activation shard directory");
  trainc->add_option("--out", ta.out, "Checkpoint directory");
  trainc->add_option("--width", ta.width, "Dictionary width(s)");
  trainc->add_option("--l1", ta.l1, "Sparsity coefficient(s)");
  trainc->add_option("--lr", ta.lr, "Learning rate(s)");
  trainc->add_option("--batch", ta.batch);
  trainc->add_option("--total", ta.total, "Total activations");
  trainc->add_option("--seed", ta.seed);
  trainc->add_option("--warmup", ta.warmup, "Warmup steps for both l1 and lr");
  trainc->add_option("--log-every", ta.log_every);
  trainc->add_option("--normalizer-samples", ta.normalizer_samples);
  trainc->add_option("--threads", ta.threads);
  trainc->add_flag("--dry-run", ta.dry_run, "Print the resolved configs and exit");

  IndexArgs ia;
  auto* index = app.add_subcommand("index", "Build the per-feature top-k exemplar index");
  index->add_option("--store", ia.store)->required();
  index->add_option("--sae", ia.sae)->required();
  index->add_option("--out", ia.out)->required();
  index->add_option("--k", ia.k);
  index->add_option("--threads", ia.threads);

  HeadArgs ha;
  auto* head = app.add_subcommand("head", "Train linear probes");
  head->require_subcommand(1);
  auto add_head_opts = [&](CLI::App* c) {
    c->add_option("--store", ha.store, "Feature rows")->required();
    c->add_option("--labels", ha.labels, "JSON label array (or object with 'labels')")->required();
    c->add_option("--out", ha.out)->required();
    c->add_option("--classes", ha.classes);
    c->add_option("--epochs", ha.epochs);
    c->add_option("--batch", ha.batch);
    c->add_option("--lr", ha.lr);
    c->add_option("--wd", ha.wd);
    c->add_option("--seed", ha.seed);
  };
  auto* train_cls = head->add_subcommand("train-cls", "Classification head on [CLS] rows");
  auto* train_seg = head->add_subcommand("train-seg", "Per-patch segmentation head");
  add_head_opts(train_cls);
  add_head_opts(train_seg);

  InterveneArgs va;
  auto* interv = app.add_subcommand("intervene", "Edit SAE features and print the edited activations");
  interv->add_option("--sae", va.sae)->required();
  interv->add_option("--x", va.x, "Rows as 'a,b;c,d'");
  interv->add_option("--store", va.store);
  auto* image_opt = interv->add_option("--image-id", va.image_id);
  interv->add_option("--edits", va.edits, "id:mode:value[,...] with mode set|scale|delta");
  interv->add_option("--scope", va.scope, "selected|all");
  interv->add_option("--patches", va.patches, "Selected rows, e.g. 0,3");
  interv->add_option("--head", va.head, "Head checkpoint for before/after labels");
  interv->add_flag("--raw", va.raw, "Skip normalization (mu = 0, scale = 1)");

  auto* eval = app.add_subcommand("eval", "Evaluation");
  eval->require_subcommand(1);
  MiouArgs ma;
  auto* miou_cmd = eval->add_subcommand("miou", "Mean IoU");
  miou_cmd->add_option("--pred", ma.pred);
  miou_cmd->add_option("--gt", ma.gt);
  miou_cmd->add_option("--head", ma.head);
  miou_cmd->add_option("--store", ma.store);
  miou_cmd->add_option("--labels", ma.labels);
  miou_cmd->add_option("--classes", ma.classes);
  miou_cmd->add_option("--ignore", ma.ignore);
  miou_cmd->add_option("--patch-px", ma.patch_px, "Upsample factor (bilinear logits, replicated labels)");

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "HTTP/JSON API");
  serve->add_option("--artifacts", sv.artifacts, "Artifact root (default $SAEV_ARTIFACT_DIR)");
  serve->add_option("--sae", sv.sae);
  serve->add_option("--index", sv.index);
  serve->add_option("--store", sv.store);
  serve->add_option("--cls-store", sv.cls_store);
  serve->add_option("--head", sv.heads, "name=path, repeatable");
  serve->add_option("--images", sv.images, "Image root with manifest.json");
  serve->add_option("--host", sv.host);
  serve->add_option("--port", sv.port);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    if (args.empty()) err << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) return run_synth(sa, out);
    if (trainc->parsed()) return run_train(ta, out, err);
    if (index->parsed()) return run_index(ia, out);
    if (train_cls->parsed()) return run_head(ha, HeadKind::Classification, out);
    if (train_seg->parsed()) return run_head(ha, HeadKind::Segmentation, out);
    if (interv->parsed()) return run_intervene(va, image_opt->count() > 0, out);
    if (miou_cmd->parsed()) return run_miou(ma, out);
    if (serve->parsed()) return run_serve(sv, out, err);
  } catch (const ArgumentError& e) {
    // bad or inconsistent flag values
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace saev
