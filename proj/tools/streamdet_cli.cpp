// Command-line front end for the streaming detector library.
//
// Subcommands: gen, gtdb, stats, train, infer, eval, bench, sampler-dump,
// ablate. Every option can also come from a flat key=value config file
// (--config); explicit command-line flags win over file values, unknown keys
// are rejected. All outputs land in a run directory under --out (or the
// STREAMDET_OUT environment variable) and begin with a reproducibility
// header: tool version, a hash of every computational option, and the seed.
// Re-running the same configuration reproduces result files byte for byte,
// except for wall-clock latency columns.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "streamdet/bench.hpp"
#include "streamdet/dataset.hpp"
#include "streamdet/eval.hpp"
#include "streamdet/pipeline.hpp"
#include "streamdet/rng.hpp"
#include "streamdet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace streamdet;

namespace {

constexpr int kToolVersion = 1;

/// Thrown for user errors (bad flags, bad config, bad values): exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Option registry: binds variables to CLI11 options and remembers how to set
// them from config-file strings and how to print them for the config hash.

class OptReg {
 public:
  explicit OptReg(CLI::App* app) : app_(app) {}

  template <typename T>
  void add(const std::string& name, T& var, const std::string& help,
           bool hashed = true) {
    CLI::Option* opt = app_->add_option("--" + name, var, help);
    entries_[name] = Entry{
        opt,
        [&var](const std::string& s) {
          T tmp{};
          if (!CLI::detail::lexical_cast(s, tmp)) return false;
          var = tmp;
          return true;
        },
        [&var] { return to_string_value(var); },
        hashed,
    };
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  /// Applies one config-file pair; command-line flags keep precedence.
  void apply(const std::string& key, const std::string& value) {
    auto it = entries_.find(key);
    if (it == entries_.end())
      throw UsageError("unknown config key: " + key);
    if (it->second.opt->count() > 0) return;  // explicit flag wins
    if (!it->second.set(value))
      throw UsageError("bad config value for " + key + ": " + value);
  }

  void collect_hash_pairs(std::map<std::string, std::string>* out) const {
    for (const auto& [name, e] : entries_)
      if (e.hashed) (*out)[name] = e.get();
  }

 private:
  template <typename T>
  static std::string to_string_value(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      return v ? "1" : "0";
    } else if constexpr (std::is_floating_point_v<T>) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
      return buf;
    } else {
      return std::to_string(v);
    }
  }

  struct Entry {
    CLI::Option* opt;
    std::function<bool(const std::string&)> set;
    std::function<std::string()> get;
    bool hashed;
  };
  CLI::App* app_;
  std::map<std::string, Entry> entries_;
};

/// Flat key=value file; '#' starts a comment, blank lines are skipped.
std::vector<std::pair<std::string, std::string>> parse_config_file(
    const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config file: " + path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(line_no) +
                       " is not key=value: " + line);
    pairs.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Shared run context.

struct RunContext {
  fs::path run_dir;
  uint64_t config_hash = 0;
  uint64_t seed = 1;
  int threads = 1;

  std::string hash_hex() const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(config_hash));
    return buf;
  }
  void write_header(std::ostream& os) const {
    os << "# streamdet version " << kToolVersion << "\n";
    os << "# config_hash " << hash_hex() << "\n";
    os << "# seed " << seed << "\n";
  }
  ordered_json json_header(const std::string& kind) const {
    ordered_json j;
    j["file"] = kind;
    j["version"] = kToolVersion;
    j["config_hash"] = hash_hex();
    j["seed"] = seed;
    return j;
  }
};

std::string timestamp_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<std::vector<FrameRecord>> sequences;  // parallel to manifest
};

LoadedDataset load_dataset(const std::string& dir) {
  if (dir.empty()) throw UsageError("--dataset is required");
  LoadedDataset d;
  d.manifest = read_manifest(dir);
  for (const SequenceInfo& info : d.manifest.sequences) {
    auto frames = read_sequence(fs::path(dir) / info.file);
    // The binary format carries no labeled flag; labeling lives in the
    // manifest's interval, same convention as manifest_samples().
    for (size_t k = 0; k < frames.size(); ++k)
      frames[k].labeled =
          (k % static_cast<size_t>(d.manifest.label_interval)) == 0;
    d.sequences.push_back(std::move(frames));
  }
  return d;
}

GridSpec make_grid(double half, double cell) {
  if (!(half > 0.0) || !(cell > 0.0))
    throw UsageError("grid extent and cell size must be positive");
  GridSpec s;
  s.x_min = -half;
  s.y_min = -half;
  s.cell_size = cell;
  s.width = static_cast<int>(std::lround(2.0 * half / cell));
  s.height = s.width;
  s.channels = kVoxelChannels;
  if (s.width < 2) throw UsageError("grid resolves to fewer than 2 cells");
  return s;
}

FusionMode parse_fusion(const std::string& name) {
  try {
    return fusion_mode_from_name(name);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Option bundles shared between train-like subcommands.

struct EngineOpts {
  double score_min = 0.3, nms_radius = 2.0, fg_score_min = 0.3, fg_margin = 0.1;
  uint64_t bank_capacity = PointBank::kDefaultCapacity;
  bool pc = true, fm = true, pm = true;

  void register_opts(OptReg& reg) {
    reg.add("score-min", score_min, "decode score threshold");
    reg.add("nms-radius", nms_radius, "decode suppression radius (m)");
    reg.add("fg-score", fg_score_min, "foreground feedback score gate");
    reg.add("fg-margin", fg_margin, "foreground box margin (m)");
    reg.add("bank-capacity", bank_capacity, "point memory capacity");
    reg.add("pc", pc, "point-cloud fusion on/off");
    reg.add("fm", fm, "feature-map fusion on/off");
    reg.add("pm", pm, "prediction-map fusion on/off");
  }
  EngineConfig to_config() const {
    EngineConfig c;
    c.score_min = score_min;
    c.nms_radius = nms_radius;
    c.fg_score_min = fg_score_min;
    c.fg_margin = fg_margin;
    c.bank_capacity = static_cast<size_t>(bank_capacity);
    c.pc_fusion = pc;
    c.fm_fusion = fm;
    c.pm_fusion = pm;
    return c;
  }
};

struct ModelOpts {
  int c_mid = 8;
  std::string fm_fusion = "concat";
  std::string pm_fusion = "concat";
  double grid_half = 40.0, grid_cell = 1.0;

  void register_opts(OptReg& reg) {
    reg.add("c-mid", c_mid, "trunk channels");
    reg.add("fm-fusion", fm_fusion, "feature-map fusion op (add|max|concat|gru)");
    reg.add("pm-fusion", pm_fusion, "prediction-map fusion op (add|max|concat|gru)");
    reg.add("grid-half", grid_half, "grid half extent (m)");
    reg.add("grid-cell", grid_cell, "grid cell size (m)");
  }
  ToyModel build(uint64_t seed) const {
    Rng rng(hash_combine(seed, hash_str("model")));
    return ToyModel::init(make_grid(grid_half, grid_cell), c_mid,
                          parse_fusion(fm_fusion), parse_fusion(pm_fusion), rng);
  }
};

struct TrainOpts {
  int epochs = 8, batch = 2, seq_len = 10;
  bool dtsl = true, seq_aug = false, gt_paste = false;
  double lr = 0.05, momentum = 0.9, lr_decay = 1.0;
  int lr_decay_every = 0;
  double reg_weight = 1.0, sigma = 1.0;
  double focal_gamma = 2.0, focal_beta = 4.0;
  int n_paste = 2;
  double flip_prob = 0.5, rot_max = 0.785398163397448279, scale_min = 0.95,
         scale_max = 1.05, trans_sigma = 0.2, paste_range = 20.0;

  void register_opts(OptReg& reg) {
    reg.add("epochs", epochs, "training epochs");
    reg.add("batch", batch, "parallel stream lanes");
    reg.add("seq-len", seq_len, "maximum training segment length");
    reg.add("dtsl", dtsl, "length curriculum on/off");
    reg.add("seq-aug", seq_aug, "stream geometric augmentation on/off");
    reg.add("gt-paste", gt_paste, "object copy-paste augmentation on/off");
    reg.add("lr", lr, "learning rate");
    reg.add("momentum", momentum, "SGD momentum");
    reg.add("lr-decay", lr_decay, "learning-rate decay factor");
    reg.add("lr-decay-every", lr_decay_every, "epochs between decays (0=off)");
    reg.add("reg-weight", reg_weight, "regression loss weight");
    reg.add("sigma", sigma, "heat target splat sigma (cells)");
    reg.add("focal-gamma", focal_gamma, "heat loss focusing exponent");
    reg.add("focal-beta", focal_beta, "near-center negative down-weight");
    reg.add("n-paste", n_paste, "objects pasted per stream");
    reg.add("flip-prob", flip_prob, "augmentation flip probability");
    reg.add("rot-max", rot_max, "augmentation max rotation (rad)");
    reg.add("scale-min", scale_min, "augmentation min scale");
    reg.add("scale-max", scale_max, "augmentation max scale");
    reg.add("trans-sigma", trans_sigma, "augmentation translation sigma (m)");
    reg.add("paste-range", paste_range, "copy-paste placement radius (m)");
  }
  TrainConfig to_config(const EngineOpts& eng, uint64_t seed) const {
    TrainConfig c;
    c.engine = eng.to_config();
    c.loss.reg_weight = reg_weight;
    c.loss.sigma_cells = sigma;
    c.loss.focal_gamma = focal_gamma;
    c.loss.focal_beta = focal_beta;
    c.epochs = epochs;
    c.batch_size = batch;
    c.max_seq_len = seq_len;
    c.use_dtsl = dtsl;
    c.seq_aug = seq_aug;
    c.use_gt_paste = gt_paste;
    c.aug.flip_prob = flip_prob;
    c.aug.rotation_max = rot_max;
    c.aug.scale_min = scale_min;
    c.aug.scale_max = scale_max;
    c.aug.translation_sigma = trans_sigma;
    c.aug.n_paste = gt_paste ? n_paste : 0;
    c.aug.paste_range = paste_range;
    c.lr = lr;
    c.momentum = momentum;
    c.lr_decay = lr_decay;
    c.lr_decay_every = lr_decay_every;
    c.seed = seed;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Inference over a dataset (shared by infer, eval-from-model, ablate).

struct InferenceResult {
  // Per sequence, per frame: detections (all frames, labeled or not).
  std::vector<std::vector<std::vector<Detection>>> detections;
};

template <typename EngineT>
InferenceResult run_inference(EngineT& engine, const LoadedDataset& data) {
  InferenceResult out;
  for (const auto& seq : data.sequences) {
    std::vector<std::vector<Detection>> per_frame;
    for (size_t k = 0; k < seq.size(); ++k)
      per_frame.push_back(engine.step(seq[k], k == 0));
    out.detections.push_back(std::move(per_frame));
  }
  return out;
}

/// mAP of an inference result against the labeled frames of the dataset.
EvalResult evaluate_inference(const InferenceResult& inf,
                              const LoadedDataset& data) {
  std::vector<std::vector<Detection>> preds;
  std::vector<std::vector<GtBox>> gts;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    for (size_t k = 0; k < data.sequences[s].size(); ++k) {
      if (!data.sequences[s][k].labeled) continue;
      preds.push_back(inf.detections[s][k]);
      gts.push_back(data.sequences[s][k].gt_boxes);
    }
  }
  return evaluate(preds, gts);
}

// ---------------------------------------------------------------------------
// Subcommand implementations. Each returns the process exit code.

struct GenArgs {
  int frames = 0;
  int sequences = 1;
  double frame_rate = 10.0;
  int label_interval = 1;
  std::string ego_mode = "straight";
  double ego_speed = 5.0, ego_radius = 50.0, lane_offset = 3.5,
         lane_change_time = 4.0;
  int n_static = 6, n_moving = 2;
  double speed_min = 2.0, speed_max = 8.0;
  double range = 60.0;
  int points_per_object = 150, ground_points = 600;
  double angular_res = 0.0, dropout = 0.0, noise = 0.02;
  double placement_min = 8.0, placement_max = 55.0;
};

int cmd_gen(const RunContext& ctx, const GenArgs& a) {
  if (a.frames <= 0) throw UsageError("duration must be positive");
  if (a.sequences <= 0) throw UsageError("sequence count must be positive");
  WorldConfig w;
  w.duration = a.frames;
  w.frame_rate = a.frame_rate;
  w.label_interval = a.label_interval;
  try {
    w.ego_mode = ego_mode_from_name(a.ego_mode);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  w.ego_speed = a.ego_speed;
  w.ego_radius = a.ego_radius;
  w.lane_offset = a.lane_offset;
  w.lane_change_time = a.lane_change_time;
  w.n_static = a.n_static;
  w.n_moving = a.n_moving;
  w.speed_min = a.speed_min;
  w.speed_max = a.speed_max;
  w.lidar_range = a.range;
  w.points_per_object = a.points_per_object;
  w.ground_points = a.ground_points;
  w.angular_resolution = a.angular_res;
  w.dropout_per_meter = a.dropout;
  w.noise_sigma = a.noise;
  w.placement_min_range = a.placement_min;
  w.placement_max_range = a.placement_max;
  try {
    w.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }

  const fs::path out = ctx.run_dir / "dataset";
  fs::create_directories(out);
  DatasetManifest manifest;
  manifest.frame_rate = w.frame_rate;
  manifest.label_interval = w.label_interval;
  size_t total_points = 0, total_boxes = 0;
  for (int s = 0; s < a.sequences; ++s) {
    const uint64_t seq_seed =
        hash_combine(ctx.seed, hash_combine(hash_str("sequence"),
                                            static_cast<uint64_t>(s)));
    const auto frames = generate_sequence(w, seq_seed);
    char name[32];
    std::snprintf(name, sizeof name, "seq_%03d.bin", s);
    write_sequence(out / name, frames);
    SequenceInfo info;
    info.id = static_cast<uint32_t>(s);
    info.file = name;
    info.frames = static_cast<int>(frames.size());
    manifest.sequences.push_back(info);
    for (const auto& f : frames) {
      total_points += f.points.size();
      total_boxes += f.gt_boxes.size();
    }
  }
  write_manifest(out, manifest);

  std::ofstream meta(ctx.run_dir / "gen.txt");
  ctx.write_header(meta);
  meta << "sequences " << a.sequences << "\nframes_per_sequence " << a.frames
       << "\ntotal_points " << total_points << "\ntotal_boxes " << total_boxes
       << "\n";
  std::cout << "dataset: " << out.string() << "\n"
            << "sequences: " << a.sequences << " x " << a.frames << " frames, "
            << total_points << " points, " << total_boxes << " gt boxes\n";
  return 0;
}

int cmd_gtdb(const RunContext& ctx, const std::string& dataset) {
  if (dataset.empty()) throw UsageError("--dataset is required");
  const GtDatabase db = build_gt_database(dataset);
  const fs::path out = ctx.run_dir / "gtdb";
  write_gt_database(out, db);
  size_t snippets = 0, points = 0;
  for (const auto& [id, obj] : db.objects) {
    snippets += obj.frames.size();
    for (const auto& s : obj.frames) points += s.points.size();
  }
  std::ofstream meta(ctx.run_dir / "gtdb.txt");
  ctx.write_header(meta);
  meta << "objects " << db.objects.size() << "\nsnippets " << snippets
       << "\npoints " << points << "\n";
  std::cout << "gt database: " << out.string() << "\nobjects: "
            << db.objects.size() << ", snippets: " << snippets
            << ", points: " << points << "\n";
  return 0;
}

int cmd_stats(const RunContext& ctx, const std::string& dataset) {
  const LoadedDataset data = load_dataset(dataset);
  std::ostringstream csv;
  csv << "seq,frames,labeled,points,boxes\n";
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    size_t labeled = 0, points = 0, boxes = 0;
    for (const auto& f : data.sequences[s]) {
      labeled += f.labeled ? 1 : 0;
      points += f.points.size();
      boxes += f.gt_boxes.size();
    }
    csv << data.manifest.sequences[s].id << "," << data.sequences[s].size()
        << "," << labeled << "," << points << "," << boxes << "\n";
  }
  std::ofstream os(ctx.run_dir / "stats.csv");
  ctx.write_header(os);
  os << csv.str();
  std::cout << csv.str();
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string gtdb;
};

int cmd_train(const RunContext& ctx, const TrainArgs& a, const ModelOpts& model,
              const EngineOpts& eng, const TrainOpts& tr) {
  const LoadedDataset data = load_dataset(a.dataset);
  GtDatabase db;
  const bool want_db = tr.gt_paste && tr.n_paste > 0;
  if (want_db) {
    if (a.gtdb.empty())
      throw UsageError("--gt-paste needs --gtdb (run the gtdb subcommand first)");
    db = read_gt_database(a.gtdb);
  }

  ToyModel init = model.build(ctx.seed);
  TrainConfig cfg = tr.to_config(eng, ctx.seed);
  std::vector<uint32_t> ids;
  for (const auto& info : data.manifest.sequences) ids.push_back(info.id);
  Trainer trainer(init, cfg, ids, data.sequences, want_db ? &db : nullptr);

  std::ofstream log(ctx.run_dir / "train_log.csv");
  ctx.write_header(log);
  log << "epoch,target_len,segments,frames,labeled_frames,mean_loss\n";
  char buf[160];
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    const EpochStats st = trainer.run_epoch(ep);
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%zu,%zu,%.9g\n", st.epoch,
                  st.target_len, st.segments, st.frames, st.labeled_frames,
                  st.mean_loss);
    log << buf;
    std::cout << "epoch " << st.epoch << " len " << st.target_len << " loss "
              << st.mean_loss << "\n";
  }
  save_model_file((ctx.run_dir / "model.ckpt").string(), trainer.model());
  std::cout << "model: " << (ctx.run_dir / "model.ckpt").string() << "\n";
  return 0;
}

struct StreamModeArgs {
  std::string mode = "int";  // int | concat
  int window = 4;
};

struct InferArgs {
  std::string dataset;
  std::string model;
  StreamModeArgs stream;
};

int cmd_infer(const RunContext& ctx, const InferArgs& a, const EngineOpts& eng) {
  if (a.model.empty()) throw UsageError("--model is required");
  const LoadedDataset data = load_dataset(a.dataset);
  const ToyModel model = load_model_file(a.model);
  const EngineConfig cfg = eng.to_config();

  InferenceResult inf;
  if (a.stream.mode == "int") {
    Engine engine(model, cfg);
    inf = run_inference(engine, data);
  } else if (a.stream.mode == "concat") {
    ConcatEngine engine(model, a.stream.window, cfg);
    inf = run_inference(engine, data);
  } else {
    throw UsageError("unknown --mode (want int or concat): " + a.stream.mode);
  }

  std::ofstream os(ctx.run_dir / "detections.jsonl");
  os << ctx.json_header("detections").dump() << "\n";
  size_t total = 0;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    for (size_t k = 0; k < data.sequences[s].size(); ++k) {
      ordered_json line;
      line["seq"] = data.manifest.sequences[s].id;
      line["frame"] = k;
      ordered_json dets = ordered_json::array();
      for (const Detection& d : inf.detections[s][k]) {
        ordered_json jd;
        jd["x"] = d.x;
        jd["y"] = d.y;
        jd["w"] = d.w;
        jd["l"] = d.l;
        jd["yaw"] = d.yaw;
        jd["score"] = d.score;
        jd["cls"] = d.cls;
        dets.push_back(jd);
      }
      line["detections"] = dets;
      os << line.dump() << "\n";
      total += inf.detections[s][k].size();
    }
  }
  std::cout << "detections: " << (ctx.run_dir / "detections.jsonl").string()
            << " (" << total << " boxes)\n";
  return 0;
}

struct EvalArgs {
  std::string dataset;
  std::string detections;
};

int cmd_eval(const RunContext& ctx, const EvalArgs& a) {
  if (a.detections.empty()) throw UsageError("--detections is required");
  const LoadedDataset data = load_dataset(a.dataset);

  // seq id -> per-frame predictions.
  std::map<uint32_t, std::map<size_t, std::vector<Detection>>> by_seq;
  std::ifstream is(a.detections);
  if (!is) throw UsageError("cannot open detections: " + a.detections);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = ordered_json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw UsageError("detections file has a malformed JSON line");
    if (!j.contains("seq")) continue;  // header line
    std::vector<Detection> dets;
    for (const auto& jd : j.at("detections")) {
      Detection d;
      d.x = jd.at("x").get<double>();
      d.y = jd.at("y").get<double>();
      d.w = jd.at("w").get<double>();
      d.l = jd.at("l").get<double>();
      d.yaw = jd.at("yaw").get<double>();
      d.score = jd.at("score").get<double>();
      d.cls = jd.at("cls").get<int>();
      dets.push_back(d);
    }
    by_seq[j.at("seq").get<uint32_t>()][j.at("frame").get<size_t>()] =
        std::move(dets);
  }

  std::vector<std::vector<Detection>> preds;
  std::vector<std::vector<GtBox>> gts;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    const uint32_t id = data.manifest.sequences[s].id;
    for (size_t k = 0; k < data.sequences[s].size(); ++k) {
      if (!data.sequences[s][k].labeled) continue;
      gts.push_back(data.sequences[s][k].gt_boxes);
      auto seq_it = by_seq.find(id);
      if (seq_it != by_seq.end()) {
        auto frame_it = seq_it->second.find(k);
        preds.push_back(frame_it != seq_it->second.end() ? frame_it->second
                                                         : std::vector<Detection>{});
      } else {
        preds.push_back({});
      }
    }
  }
  const EvalResult r = evaluate(preds, gts);

  std::ofstream os(ctx.run_dir / "ap.csv");
  ctx.write_header(os);
  write_ap_csv(os, r);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "mAP %.6f  (tp %zu fp %zu fn %zu at %.1f m)\n", r.map, r.tp,
                r.fp, r.fn, r.operating_threshold);
  std::cout << "ap table: " << (ctx.run_dir / "ap.csv").string() << "\n" << buf;
  return 0;
}

struct BenchArgs {
  std::string dataset;
  std::string model;  // optional; random-initialized when empty
  StreamModeArgs stream;
  int frames = 0;  // 0 = all of the chosen sequence
  int warmup = 50;
  uint32_t sequence = 0;
};

int cmd_bench(const RunContext& ctx, const BenchArgs& a, const ModelOpts& mo,
              const EngineOpts& eng) {
  const LoadedDataset data = load_dataset(a.dataset);
  const std::vector<FrameRecord>* seq = nullptr;
  for (size_t s = 0; s < data.sequences.size(); ++s)
    if (data.manifest.sequences[s].id == a.sequence) seq = &data.sequences[s];
  if (seq == nullptr)
    throw UsageError("sequence id not in dataset: " + std::to_string(a.sequence));

  std::vector<FrameRecord> frames = *seq;
  if (a.frames > 0) {
    if (static_cast<size_t>(a.frames) > frames.size())
      throw UsageError("--frames exceeds sequence length");
    frames.resize(static_cast<size_t>(a.frames));
  }
  if (a.warmup < 0 || static_cast<size_t>(a.warmup) >= frames.size())
    throw UsageError("--warmup must be smaller than the frame count");

  const ToyModel model =
      a.model.empty() ? mo.build(ctx.seed) : load_model_file(a.model);
  const EngineConfig cfg = eng.to_config();

  LatencyReport report;
  if (a.stream.mode == "int") {
    Engine engine(model, cfg);
    report = bench_stream(engine, frames, a.warmup);
  } else if (a.stream.mode == "concat") {
    ConcatEngine engine(model, a.stream.window, cfg);
    report = bench_stream(engine, frames, a.warmup);
  } else {
    throw UsageError("unknown --mode (want int or concat): " + a.stream.mode);
  }

  {
    std::ofstream os(ctx.run_dir / "latency.csv");
    ctx.write_header(os);
    write_latency_csv(os, report);
  }
  {
    std::ofstream os(ctx.run_dir / "stages.csv");
    ctx.write_header(os);
    write_stage_csv(os, report);
  }
  {
    // Work counters carry the constant-vs-linear story without a clock;
    // unlike the latency columns these are deterministic.
    std::ofstream os(ctx.run_dir / "counters.csv");
    ctx.write_header(os);
    os << "frame,points_in,points_voxelized,bank_size,grid_cells\n";
    char buf[120];
    for (const StepStats& st : report.stats) {
      std::snprintf(buf, sizeof buf, "%llu,%zu,%zu,%zu,%zu\n",
                    static_cast<unsigned long long>(st.frame_index),
                    st.points_in, st.points_voxelized, st.bank_size,
                    st.grid_cells);
      os << buf;
    }
  }
  {
    std::ofstream os(ctx.run_dir / "latency.svg");
    write_latency_svg(os, report);
  }
  {
    std::ofstream os(ctx.run_dir / "summary.txt");
    ctx.write_header(os);
    char buf[240];
    std::snprintf(buf, sizeof buf,
                  "frames %d\nwarmup %d\nmean_micros %.3f\np50_micros %.3f\n"
                  "p99_micros %.3f\nslope_micros_per_frame %.6f\n"
                  "peak_bank_size %zu\npeak_resident_bytes %zu\n",
                  report.frames, report.warmup, report.mean_micros,
                  report.p50_micros, report.p99_micros,
                  report.slope_micros_per_frame, report.peak_bank_size,
                  report.peak_resident_bytes);
    os << buf;
  }
  std::printf("frames %d (warmup %d)  mean %.1f us  p50 %.1f us  p99 %.1f us  "
              "slope %.4f us/frame\n",
              report.frames, report.warmup, report.mean_micros,
              report.p50_micros, report.p99_micros,
              report.slope_micros_per_frame);
  return 0;
}

struct SamplerArgs {
  std::string dataset;  // either a dataset...
  std::string lens;     // ...or explicit comma-separated sequence lengths
  int batch = 2;
  int target_len = 4;
  bool dtsl = false;
  int epoch = 0;
  int epochs = 8;
};

int cmd_sampler_dump(const RunContext& ctx, const SamplerArgs& a) {
  std::vector<SampleIndex> samples;
  if (!a.dataset.empty()) {
    samples = manifest_samples(read_manifest(a.dataset));
  } else if (!a.lens.empty()) {
    std::stringstream ss(a.lens);
    std::string tok;
    uint32_t seq = 0;
    while (std::getline(ss, tok, ',')) {
      int len = 0;
      if (!CLI::detail::lexical_cast(tok, len) || len <= 0)
        throw UsageError("bad --lens entry: " + tok);
      for (int k = 0; k < len; ++k) {
        SampleIndex si;
        si.sequence_id = seq;
        si.frame_index = k;
        si.labeled = true;
        samples.push_back(si);
      }
      ++seq;
    }
  } else {
    throw UsageError("need --dataset or --lens");
  }
  if (samples.empty()) throw UsageError("no samples to schedule");

  int target = a.target_len;
  if (a.dtsl) {
    DtslConfig d;
    d.l_max = a.target_len;
    d.ep_all = a.epochs;
    d.ep_cur = a.epoch;
    target = dtsl_length(d);
  }
  const uint64_t seed = hash_combine(
      hash_combine(ctx.seed, hash_str("epoch")), static_cast<uint64_t>(a.epoch));
  Schedule sched = split_and_pad(sort_sequences(samples), target, a.batch, seed);
  sched.validate();

  std::ofstream os(ctx.run_dir / "schedule.jsonl");
  os << ctx.json_header("schedule").dump() << "\n";
  dump_schedule_jsonl(sched, os);
  size_t replicated = 0;
  for (const auto& lane : sched.lanes)
    for (const Segment& s : lane) replicated += s.replicated ? 1 : 0;
  std::cout << "schedule: " << (ctx.run_dir / "schedule.jsonl").string() << "\n"
            << "lanes " << sched.lanes.size() << ", segments/lane "
            << sched.segments_per_lane() << ", target_len " << target
            << ", replicated " << replicated << ", frames "
            << sched.total_frames() << "\n";
  return 0;
}

struct AblateArgs {
  std::string dataset;
  std::string combos = "minimal";  // minimal | all
};

int cmd_ablate(const RunContext& ctx, const AblateArgs& a, const ModelOpts& mo,
               const EngineOpts& eng, const TrainOpts& tr) {
  const LoadedDataset data = load_dataset(a.dataset);
  std::vector<std::array<bool, 3>> combos;
  if (a.combos == "minimal") {
    combos = {{false, false, false},
              {true, false, false},
              {false, true, false},
              {false, false, true},
              {true, true, true}};
  } else if (a.combos == "all") {
    for (int m = 0; m < 8; ++m)
      combos.push_back({(m & 4) != 0, (m & 2) != 0, (m & 1) != 0});
  } else {
    throw UsageError("unknown --combos (want minimal or all): " + a.combos);
  }

  std::vector<uint32_t> ids;
  for (const auto& info : data.manifest.sequences) ids.push_back(info.id);
  const ToyModel init = mo.build(ctx.seed);

  std::ofstream os(ctx.run_dir / "ablate.csv");
  ctx.write_header(os);
  os << "pc,fm,pm,map\n";
  char buf[80];
  for (const auto& combo : combos) {
    EngineOpts combo_eng = eng;
    combo_eng.pc = combo[0];
    combo_eng.fm = combo[1];
    combo_eng.pm = combo[2];
    TrainConfig cfg = tr.to_config(combo_eng, ctx.seed);
    Trainer trainer(init, cfg, ids, data.sequences, nullptr);
    trainer.run();
    Engine engine(trainer.model(), combo_eng.to_config());
    const EvalResult r = evaluate_inference(run_inference(engine, data), data);
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.9g\n", combo[0] ? 1 : 0,
                  combo[1] ? 1 : 0, combo[2] ? 1 : 0, r.map);
    os << buf;
    std::cout << "pc=" << combo[0] << " fm=" << combo[1] << " pm=" << combo[2]
              << "  mAP " << r.map << "\n";
  }
  std::cout << "sweep: " << (ctx.run_dir / "ablate.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"streaming multi-frame 3D detection toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_root = "runs";
  std::string run_name;
  uint64_t seed = 1;
  int threads = 1;
  app.add_option("--config", config_path,
                 "flat key=value config file (flags override it)");
  app.add_option("--out", out_root, "output root directory")
      ->envname("STREAMDET_OUT");
  app.add_option("--run-name", run_name,
                 "run directory name (default: <cmd>-<hash>-<utc time>)");
  OptReg global_reg(&app);
  global_reg.add("seed", seed, "master random seed");
  global_reg.add("threads", threads, "worker thread cap (bench forces 1)",
                 /*hashed=*/false);

  // --- gen ---
  GenArgs gen;
  CLI::App* gen_app = app.add_subcommand("gen", "generate a synthetic dataset");
  OptReg gen_reg(gen_app);
  gen_reg.add("frames", gen.frames, "frames per sequence");
  gen_reg.add("sequences", gen.sequences, "number of sequences");
  gen_reg.add("frame-rate", gen.frame_rate, "frames per second");
  gen_reg.add("label-interval", gen.label_interval, "label every Nth frame");
  gen_reg.add("ego-mode", gen.ego_mode, "straight|arc|lane_change");
  gen_reg.add("ego-speed", gen.ego_speed, "ego speed (m/s)");
  gen_reg.add("ego-radius", gen.ego_radius, "arc radius (m)");
  gen_reg.add("lane-offset", gen.lane_offset, "lane-change offset (m)");
  gen_reg.add("lane-change-time", gen.lane_change_time, "lane-change time (s)");
  gen_reg.add("n-static", gen.n_static, "static objects");
  gen_reg.add("n-moving", gen.n_moving, "moving objects");
  gen_reg.add("speed-min", gen.speed_min, "moving object min speed (m/s)");
  gen_reg.add("speed-max", gen.speed_max, "moving object max speed (m/s)");
  gen_reg.add("range", gen.range, "lidar range (m)");
  gen_reg.add("points-per-object", gen.points_per_object, "surface samples");
  gen_reg.add("ground-points", gen.ground_points, "ground samples per frame");
  gen_reg.add("angular-res", gen.angular_res, "angular resolution (rad)");
  gen_reg.add("dropout", gen.dropout, "dropout rate per meter");
  gen_reg.add("noise", gen.noise, "point noise sigma (m)");
  gen_reg.add("placement-min", gen.placement_min, "min object radius (m)");
  gen_reg.add("placement-max", gen.placement_max, "max object radius (m)");

  // --- gtdb ---
  std::string gtdb_dataset;
  CLI::App* gtdb_app =
      app.add_subcommand("gtdb", "build the ground-truth object database");
  OptReg gtdb_reg(gtdb_app);
  gtdb_reg.add("dataset", gtdb_dataset, "dataset directory");

  // --- stats ---
  std::string stats_dataset;
  CLI::App* stats_app =
      app.add_subcommand("stats", "per-sequence point/box counts");
  OptReg stats_reg(stats_app);
  stats_reg.add("dataset", stats_dataset, "dataset directory");

  // --- train ---
  TrainArgs train_args;
  ModelOpts train_model;
  EngineOpts train_eng;
  TrainOpts train_opts;
  CLI::App* train_app = app.add_subcommand("train", "train a detector");
  OptReg train_reg(train_app);
  train_reg.add("dataset", train_args.dataset, "dataset directory");
  train_reg.add("gtdb", train_args.gtdb, "gt database directory");
  train_model.register_opts(train_reg);
  train_eng.register_opts(train_reg);
  train_opts.register_opts(train_reg);

  // --- infer ---
  InferArgs infer_args;
  EngineOpts infer_eng;
  CLI::App* infer_app =
      app.add_subcommand("infer", "run streaming inference, write JSON lines");
  OptReg infer_reg(infer_app);
  infer_reg.add("dataset", infer_args.dataset, "dataset directory");
  infer_reg.add("model", infer_args.model, "model checkpoint");
  infer_reg.add("mode", infer_args.stream.mode, "int | concat");
  infer_reg.add("window", infer_args.stream.window, "concat window");
  infer_eng.register_opts(infer_reg);

  // --- eval ---
  EvalArgs eval_args;
  CLI::App* eval_app =
      app.add_subcommand("eval", "score detections against ground truth");
  OptReg eval_reg(eval_app);
  eval_reg.add("dataset", eval_args.dataset, "dataset directory");
  eval_reg.add("detections", eval_args.detections, "detections JSON-lines file");

  // --- bench ---
  BenchArgs bench_args;
  ModelOpts bench_model;
  EngineOpts bench_eng;
  CLI::App* bench_app =
      app.add_subcommand("bench", "latency benchmark over a stream");
  OptReg bench_reg(bench_app);
  bench_reg.add("dataset", bench_args.dataset, "dataset directory");
  bench_reg.add("model", bench_args.model, "model checkpoint (optional)");
  bench_reg.add("mode", bench_args.stream.mode, "int | concat");
  bench_reg.add("window", bench_args.stream.window, "concat window");
  bench_reg.add("frames", bench_args.frames, "frames to run (0 = all)");
  bench_reg.add("warmup", bench_args.warmup, "frames excluded from stats");
  bench_reg.add("sequence", bench_args.sequence, "sequence id to stream");
  bench_model.register_opts(bench_reg);
  bench_eng.register_opts(bench_reg);

  // --- sampler-dump ---
  SamplerArgs sampler_args;
  CLI::App* sampler_app =
      app.add_subcommand("sampler-dump", "dump one epoch's segment schedule");
  OptReg sampler_reg(sampler_app);
  sampler_reg.add("dataset", sampler_args.dataset, "dataset directory");
  sampler_reg.add("lens", sampler_args.lens,
                  "comma-separated sequence lengths (alternative to --dataset)");
  sampler_reg.add("batch", sampler_args.batch, "lanes");
  sampler_reg.add("target-len", sampler_args.target_len, "segment length");
  sampler_reg.add("dtsl", sampler_args.dtsl, "apply length curriculum");
  sampler_reg.add("epoch", sampler_args.epoch, "epoch index");
  sampler_reg.add("epochs", sampler_args.epochs, "total epochs (for dtsl)");

  // --- ablate ---
  AblateArgs ablate_args;
  ModelOpts ablate_model;
  EngineOpts ablate_eng;
  TrainOpts ablate_opts;
  ablate_opts.epochs = 4;
  CLI::App* ablate_app = app.add_subcommand(
      "ablate", "train + evaluate the fusion on/off sweep");
  OptReg ablate_reg(ablate_app);
  ablate_reg.add("dataset", ablate_args.dataset, "dataset directory");
  ablate_reg.add("combos", ablate_args.combos, "minimal | all");
  ablate_model.register_opts(ablate_reg);
  ablate_eng.register_opts(ablate_reg);
  ablate_opts.register_opts(ablate_reg);

  // Let global options (--seed, --out, ...) appear after the subcommand too.
  for (CLI::App* sc : app.get_subcommands([](CLI::App*) { return true; }))
    sc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" ||
        e.get_name() == "CallForVersion")
      return app.exit(e);
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    std::map<std::string, OptReg*> regs{
        {"gen", &gen_reg},       {"gtdb", &gtdb_reg},
        {"stats", &stats_reg},   {"train", &train_reg},
        {"infer", &infer_reg},   {"eval", &eval_reg},
        {"bench", &bench_reg},   {"sampler-dump", &sampler_reg},
        {"ablate", &ablate_reg}};
    OptReg* sub_reg = regs.at(cmd);

    if (!config_path.empty()) {
      for (const auto& [key, value] : parse_config_file(config_path)) {
        if (sub_reg->has(key)) {
          sub_reg->apply(key, value);
        } else {
          global_reg.apply(key, value);  // throws UsageError when unknown
        }
      }
    }

    RunContext ctx;
    ctx.seed = seed;
    if (threads < 1) throw UsageError("--threads must be >= 1");
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    ctx.threads = std::min(threads, std::max(1, hw));
    if (cmd == "bench" && ctx.threads != 1) {
      std::cout << "bench forces --threads 1 for stable timing\n";
      ctx.threads = 1;
    }

    std::map<std::string, std::string> hash_pairs;
    global_reg.collect_hash_pairs(&hash_pairs);
    sub_reg->collect_hash_pairs(&hash_pairs);
    uint64_t h = hash_str(cmd);
    for (const auto& [k, v] : hash_pairs)
      h = hash_combine(h, hash_combine(hash_str(k), hash_str(v)));
    ctx.config_hash = h;

    if (run_name.empty())
      run_name = cmd + "-" + ctx.hash_hex().substr(0, 8) + "-" + timestamp_now();
    ctx.run_dir = fs::path(out_root) / run_name;
    fs::create_directories(ctx.run_dir);
    std::cout << "run directory: " << ctx.run_dir.string() << "\n";

    if (cmd == "gen") return cmd_gen(ctx, gen);
    if (cmd == "gtdb") return cmd_gtdb(ctx, gtdb_dataset);
    if (cmd == "stats") return cmd_stats(ctx, stats_dataset);
    if (cmd == "train")
      return cmd_train(ctx, train_args, train_model, train_eng, train_opts);
    if (cmd == "infer") return cmd_infer(ctx, infer_args, infer_eng);
    if (cmd == "eval") return cmd_eval(ctx, eval_args);
    if (cmd == "bench")
      return cmd_bench(ctx, bench_args, bench_model, bench_eng);
    if (cmd == "sampler-dump") return cmd_sampler_dump(ctx, sampler_args);
    if (cmd == "ablate")
      return cmd_ablate(ctx, ablate_args, ablate_model, ablate_eng, ablate_opts);
    throw UsageError("unhandled subcommand: " + cmd);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
