#include "musefuse/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <openssl/evp.h>

#include <CLI11.hpp>

#include "musefuse/nn/checkpoint.hpp"

namespace musefuse::cli {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void usage(const std::string& what) { throw Error(ErrorCode::UsageError, what); }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const std::vector<std::string>& path_keys() {
  static const std::vector<std::string> keys = {"data", "out", "checkpoint"};
  return keys;
}

std::string join_ints(std::initializer_list<long long> v) {
  std::string s;
  for (long long x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void put_model_defaults(std::map<std::string, std::string>& m, const std::string& prefix, const ModelConfig& c) {
  m[prefix + ".encoder_widths"] = join_ints({c.encoder_widths[0], c.encoder_widths[1]});
  m[prefix + ".decoder_widths_hand"] = join_ints({c.decoder_widths.hand[0], c.decoder_widths.hand[1]});
  m[prefix + ".decoder_widths_wrist"] = join_ints({c.decoder_widths.wrist[0], c.decoder_widths.wrist[1]});
  m[prefix + ".mlp_hidden"] = join_ints({c.mlp_hidden.hand, c.mlp_hidden.wrist});
  m[prefix + ".dropout"] = fmt(c.dropout);
  m[prefix + ".kernel"] = join_ints({c.kernel.h, c.kernel.w});
  m[prefix + ".pool1"] = join_ints({c.pools[0].h, c.pools[0].w});
  m[prefix + ".pool2"] = join_ints({c.pools[1].h, c.pools[1].w});
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::UsageError:
    case ErrorCode::ConfigInvalid:
    case ErrorCode::SpecInvalid:
    case ErrorCode::UnknownMode:
    case ErrorCode::FoldOutOfRange:
    case ErrorCode::SessionOutOfRange:
    case ErrorCode::InvalidCutoff:
    case ErrorCode::InvalidCenter:
    case ErrorCode::InvalidRate:
      return kExitUsage;
    case ErrorCode::DivergedLoss:
      return kExitDiverged;
    default:
      return kExitData;
  }
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig::RunConfig() {
  auto& m = values_;
  m["data"] = "";
  m["out"] = "";
  m["checkpoint"] = "";
  m["runs"] = "";
  m["seed"] = "1";
  m["scheme"] = "aggregated";
  m["modality"] = "fusion";
  m["fold"] = "0";
  m["r2_aggregation"] = "per-joint";

  const TrainConfig t;
  m["train.max_epochs"] = std::to_string(t.max_epochs);
  m["train.patience"] = std::to_string(t.patience);
  m["train.lr"] = fmt(t.lr);
  m["train.weight_decay"] = fmt(t.weight_decay);
  m["train.decoupled_weight_decay"] = t.decoupled_weight_decay ? "true" : "false";
  m["train.batch_size"] = std::to_string(t.batch_size);
  m["train.loss_weight_hand"] = fmt(t.task_loss_weights.hand);
  m["train.loss_weight_wrist"] = fmt(t.task_loss_weights.wrist);

  const ModelConfig emg = ModelConfig::emg_default();
  put_model_defaults(m, "emg", emg);
  m["emg.residual_width"] = std::to_string(emg.residual_width);
  put_model_defaults(m, "us", ModelConfig::us_default());
  const FusionConfig fu = FusionConfig::defaults();
  m["fusion.head_hidden"] = join_ints({fu.head_hidden.hand, fu.head_hidden.wrist});
  m["fusion.dropout"] = fmt(fu.dropout);

  const ProtocolSpec p;
  m["synth.sessions"] = std::to_string(p.n_sessions);
  m["synth.sets"] = std::to_string(p.n_sets);
  m["synth.reps"] = std::to_string(p.reps);
  m["synth.hold_s"] = fmt(p.hold_s);
  m["synth.rest_s"] = fmt(p.rest_s);
  m["synth.transition_ms"] = fmt(p.transition_ms);
  const SynthOptions so;
  m["synth.us_offset_us"] = std::to_string(so.us_offset_us);
  m["synth.glove_offset_us"] = std::to_string(so.glove_offset_us);
  m["synth.jitter_us"] = std::to_string(so.jitter_us);
  m["synth.emg_tail_s"] = fmt(so.emg_tail_s);
  m["synth.sw_trigger_interval_s"] = fmt(so.sw_trigger_interval_s);
  const MixingModel mm;
  m["synth.session_perturbation"] = fmt(mm.session_perturbation);
  m["synth.emg_line_amplitude"] = fmt(mm.emg_line_amplitude);
  m["synth.emg_white_sigma"] = fmt(mm.emg_white_sigma);
  m["synth.us_white_sigma"] = fmt(mm.us_white_sigma);
  m["synth.scatterers"] = "5";
  m["synth.threads"] = "1";

  m["corrupt.modality"] = "none";
  m["corrupt.mode"] = "noise-swamp";
  m["corrupt.snr_db"] = "0";
  m["corrupt.channel"] = "0";
  m["corrupt.sets"] = "";  // set indices within each session; empty means all

  m["report.smooth_ms"] = "670";
}

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) usage(origin + ":" + std::to_string(lineno) + ": expected key = value");
    set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) usage("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) usage("unknown config key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) usage(key + ": expected an integer, got '" + s + "'");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) usage(key + ": expected a number, got '" + s + "'");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  usage(key + ": expected true or false, got '" + s + "'");
}

std::vector<int> RunConfig::get_ints(const std::string& key) const {
  std::vector<int> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = trim(item);
    int v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
      usage(key + ": expected comma-separated integers, got '" + get(key) + "'");
    }
    out.push_back(v);
  }
  return out;
}

void RunConfig::resolve_paths() {
  for (const auto& k : path_keys()) {
    auto& v = values_[k];
    if (!v.empty()) v = fs::absolute(v).lexically_normal().string();
  }
  if (!values_["runs"].empty()) {
    std::string joined;
    std::istringstream in(values_["runs"]);
    std::string item;
    while (std::getline(in, item, ',')) {
      joined += (joined.empty() ? "" : ",") + fs::absolute(trim(item)).lexically_normal().string();
    }
    values_["runs"] = joined;
  }
}

std::string RunConfig::echo() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
  return s;
}

fs::path RunConfig::path(const std::string& key) const {
  const std::string& v = get(key);
  if (v.empty()) usage("missing required path '" + key + "'");
  return fs::path(v);
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.max_epochs = static_cast<int>(get_int("train.max_epochs"));
  t.patience = static_cast<int>(get_int("train.patience"));
  t.lr = get_double("train.lr");
  t.weight_decay = get_double("train.weight_decay");
  t.decoupled_weight_decay = get_bool("train.decoupled_weight_decay");
  t.batch_size = static_cast<int>(get_int("train.batch_size"));
  t.task_loss_weights = {get_double("train.loss_weight_hand"), get_double("train.loss_weight_wrist")};
  t.seed = seed();
  t.validate();
  return t;
}

namespace {

std::array<int, 2> pair_of(const RunConfig& c, const std::string& key) {
  const auto v = c.get_ints(key);
  if (v.size() != 2) usage(key + ": expected two comma-separated integers");
  return {v[0], v[1]};
}

ModelConfig model_config(const RunConfig& c, const std::string& prefix, ModelConfig m) {
  m.encoder_widths = pair_of(c, prefix + ".encoder_widths");
  m.decoder_widths = {pair_of(c, prefix + ".decoder_widths_hand"), pair_of(c, prefix + ".decoder_widths_wrist")};
  const auto h = pair_of(c, prefix + ".mlp_hidden");
  m.mlp_hidden = {h[0], h[1]};
  m.dropout = c.get_double(prefix + ".dropout");
  const auto k = pair_of(c, prefix + ".kernel");
  m.kernel = {k[0], k[1]};
  const auto p1 = pair_of(c, prefix + ".pool1");
  const auto p2 = pair_of(c, prefix + ".pool2");
  m.pools = {PoolSize{p1[0], p1[1]}, PoolSize{p2[0], p2[1]}};
  if (prefix == "emg") m.residual_width = static_cast<int>(c.get_int("emg.residual_width"));
  m.validate();
  return m;
}

}  // namespace

ModelSpec RunConfig::model_spec() const {
  ModelSpec s;
  s.modality = parse_modality(get("modality"));
  s.emg = model_config(*this, "emg", ModelConfig::emg_default());
  s.us = model_config(*this, "us", ModelConfig::us_default());
  s.fusion.emg = s.emg;
  s.fusion.us = s.us;
  const auto h = pair_of(*this, "fusion.head_hidden");
  s.fusion.head_hidden = {h[0], h[1]};
  s.fusion.dropout = get_double("fusion.dropout");
  s.fusion.validate();
  return s;
}

ProtocolSpec RunConfig::protocol_spec() const {
  ProtocolSpec p;
  p.n_sessions = static_cast<int>(get_int("synth.sessions"));
  p.n_sets = static_cast<int>(get_int("synth.sets"));
  p.reps = static_cast<int>(get_int("synth.reps"));
  p.hold_s = get_double("synth.hold_s");
  p.rest_s = get_double("synth.rest_s");
  p.transition_ms = get_double("synth.transition_ms");
  p.validate();
  return p;
}

SynthOptions RunConfig::synth_options() const {
  SynthOptions o;
  o.us_offset_us = get_int("synth.us_offset_us");
  o.glove_offset_us = get_int("synth.glove_offset_us");
  o.jitter_us = get_int("synth.jitter_us");
  o.emg_tail_s = get_double("synth.emg_tail_s");
  o.sw_trigger_interval_s = get_double("synth.sw_trigger_interval_s");
  o.validate();
  return o;
}

MixingModel RunConfig::mixing_model() const {
  MixingModel m = MixingModel::random(CounterRng(seed()).fork(0x6d6978).next_u64(),
                                      static_cast<int>(get_int("synth.scatterers")));
  m.session_perturbation = get_double("synth.session_perturbation");
  m.emg_line_amplitude = get_double("synth.emg_line_amplitude");
  m.emg_white_sigma = get_double("synth.emg_white_sigma");
  m.us_white_sigma = get_double("synth.us_white_sigma");
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::IoError, "SHA-256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

void write_manifest(const fs::path& out, std::string_view command, const RunConfig& cfg,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  std::string s = "# musefuse run manifest\ncommand = " + std::string(command) + "\n";
  s += cfg.echo();
  for (const auto& p : inputs) s += "input " + sha256_hex(read_file(p)) + " " + p.string() + "\n";
  for (const auto& p : outputs) {
    s += "output " + sha256_hex(read_file(p)) + " " + p.lexically_relative(out).string() + "\n";
  }
  write_text(out / "manifest.txt", s);
}

std::vector<fs::path> find_set_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error(ErrorCode::IoError, "not a directory: " + root.string());
  auto index_of = [](const fs::path& p, std::string_view prefix) -> int {
    const std::string name = p.filename().string();
    if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size()) return -1;
    int v = -1;
    const auto [ptr, ec] = std::from_chars(name.data() + prefix.size(), name.data() + name.size(), v);
    return ec == std::errc() && ptr == name.data() + name.size() ? v : -1;
  };
  std::vector<std::pair<std::pair<int, int>, fs::path>> found;
  for (const auto& s : fs::directory_iterator(root)) {
    const int si = index_of(s.path(), "session");
    if (!s.is_directory() || si < 0) continue;
    for (const auto& k : fs::directory_iterator(s.path())) {
      const int ki = index_of(k.path(), "set");
      if (k.is_directory() && ki >= 0) found.push_back({{si, ki}, k.path()});
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(std::move(f.second));
  if (out.empty()) throw Error(ErrorCode::IoError, "no session*/set* directories under " + root.string());
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / "dataset.bin" : p; }

Entries load_dataset(const fs::path& p) { return parse_dataset(read_file(dataset_file(p))); }

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path out = cfg.path("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out.string() + ": " + ec.message());
  return out;
}

R2Aggregation r2_aggregation(const RunConfig& cfg) {
  const std::string& s = cfg.get("r2_aggregation");
  if (s == "per-joint") return R2Aggregation::PerJoint;
  if (s == "pooled") return R2Aggregation::Pooled;
  usage("r2_aggregation must be per-joint or pooled");
}

std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << std::setprecision(9) << "epoch,train_loss,val_loss,improved\n";
  for (const auto& e : h.epochs) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << (e.improved ? 1 : 0) << '\n';
  os << "# best_epoch=" << h.best_epoch << " stopped_early=" << (h.stopped_early ? 1 : 0) << '\n';
  return os.str();
}

void cmd_synth(const RunConfig& cfg) {
  const fs::path out = prepare_out(cfg);
  const auto dirs = gen_corpus(out, cfg.protocol_spec(), GestureTable::defaults(), cfg.mixing_model(), cfg.seed(),
                               cfg.synth_options(), static_cast<int>(cfg.get_int("synth.threads")));
  std::vector<fs::path> outputs;
  for (const auto& d : dirs) {
    for (const char* f : {"emg.bin", "us.bin", "glove.bin", "meta.txt", "latent.bin"}) outputs.push_back(d / f);
  }
  write_manifest(out, "synth", cfg, {}, outputs);
}

void cmd_align(const RunConfig& cfg) {
  const fs::path data = cfg.path("data");
  const fs::path out = prepare_out(cfg);
  std::ostringstream os;
  os << std::setprecision(10)
     << "session,set,glove_offset_us,us_rate_us_per_pulse,us_anchors,max_us_residual_us,max_glove_residual_us,"
        "dropped_us_frames,dropped_emg_samples,dropped_glove_samples,duration_mismatch\n";
  std::vector<fs::path> inputs;
  for (const auto& d : find_set_dirs(data)) {
    const AlignedSession s = align_set(load_set(d));
    const AlignmentReport r = validate_alignment(s);
    os << s.session_id << ',' << s.set_id << ',' << s.glove_time_offset_us() << ',' << s.us_time_map.rate_us_per_pulse()
       << ',' << s.us_time_map.anchors().size() << ',' << r.max_us_anchor_residual_us << ',' << r.max_glove_residual_us
       << ',' << r.dropped_us_frames << ',' << r.dropped_emg_samples << ',' << r.dropped_glove_samples << ','
       << (r.duration_mismatch ? 1 : 0) << '\n';
    for (const char* f : {"emg.bin", "us.bin", "glove.bin", "meta.txt"}) inputs.push_back(d / f);
  }
  write_text(out / "alignment.csv", os.str());
  write_manifest(out, "align", cfg, inputs, {out / "alignment.csv"});
}

void cmd_build_dataset(const RunConfig& cfg) {
  const fs::path data = cfg.path("data");
  const fs::path out = prepare_out(cfg);
  const std::string target = cfg.get("corrupt.modality");
  std::optional<Corruption> corruption;
  if (target != "none") {
    Corruption c;
    c.modality = parse_modality(target);
    if (c.modality == Modality::Fusion) usage("corrupt.modality must be none, emg or us");
    c.mode = parse_corrupt_mode(cfg.get("corrupt.mode"));
    c.snr_db = cfg.get_double("corrupt.snr_db");
    c.channel = static_cast<int>(cfg.get_int("corrupt.channel"));
    corruption = c;
  }
  const std::vector<int> only_sets = cfg.get("corrupt.sets").empty() ? std::vector<int>{} : cfg.get_ints("corrupt.sets");

  Entries all;
  std::vector<fs::path> inputs;
  std::ostringstream summary;
  summary << "session,set,entries,dropped_insufficient_history,skipped_incomplete_scans\n";
  for (const auto& d : find_set_dirs(data)) {
    RawSet raw = load_set(d);
    const bool hit = corruption && (only_sets.empty() || std::find(only_sets.begin(), only_sets.end(),
                                                                   raw.meta.set_id) != only_sets.end());
    if (hit) {
      const std::uint64_t s = CounterRng(cfg.seed()).fork(static_cast<std::uint64_t>(raw.meta.session_id * 64 + raw.meta.set_id)).next_u64();
      raw = corrupt_modality(raw, *corruption, s);
    }
    const int session_id = raw.meta.session_id, set_id = raw.meta.set_id;
    BuildResult b = build_entries(align_set(std::move(raw)));
    summary << session_id << ',' << set_id << ',' << b.entries.size() << ',' << b.dropped_insufficient_history << ','
            << b.skipped_incomplete_scans << '\n';
    all.insert(all.end(), b.entries.begin(), b.entries.end());
    for (const char* f : {"emg.bin", "us.bin", "glove.bin", "meta.txt"}) inputs.push_back(d / f);
  }
  write_file(out / "dataset.bin", serialize_dataset(all));
  write_text(out / "dataset_summary.csv", summary.str());
  write_manifest(out, "build-dataset", cfg, inputs, {out / "dataset.bin", out / "dataset_summary.csv"});
}

void cmd_train(const RunConfig& cfg) {
  const fs::path data = cfg.path("data");
  const fs::path out = prepare_out(cfg);
  const Entries entries = load_dataset(data);
  const Scheme scheme = parse_scheme(cfg.get("scheme"));
  const int fold = static_cast<int>(cfg.get_int("fold"));
  const Partition part = select(entries, make_split(scheme, fold));
  TrainConfig tc = cfg.train_config();
  tc.seed = cfg.seed() + static_cast<std::uint64_t>(fold);
  Model<float> model = build_model<float>(cfg.model_spec(), tc.seed);
  const TrainHistory h = train(model, part.train, part.val, tc);
  write_file(out / "model.ckpt", nn::serialize_checkpoint(model.state()));
  write_text(out / "history.csv", history_csv(h));
  write_text(out / "model_card.txt", model_card(model));
  write_manifest(out, "train", cfg, {dataset_file(data)}, {out / "model.ckpt", out / "history.csv", out / "model_card.txt"});
}

Model<float> load_model(const RunConfig& cfg) {
  Model<float> model = build_model<float>(cfg.model_spec(), 0);
  model.load_state(nn::parse_checkpoint(read_file(cfg.path("checkpoint"))));
  return model;
}

void cmd_eval(const RunConfig& cfg) {
  const fs::path data = cfg.path("data");
  const fs::path out = prepare_out(cfg);
  const Entries entries = load_dataset(data);
  const Scheme scheme = parse_scheme(cfg.get("scheme"));
  const int fold = static_cast<int>(cfg.get_int("fold"));
  const Partition part = select(entries, make_split(scheme, fold));
  Model<float> model = load_model(cfg);
  MetricsReport r = evaluate(model, part.test, r2_aggregation(cfg));
  r.split = std::string(to_string(scheme)) + "/fold" + std::to_string(fold);
  write_text(out / "metrics.csv", metrics_csv_header() + metrics_csv_rows(scheme, fold, r));
  write_manifest(out, "eval", cfg, {dataset_file(data), cfg.path("checkpoint")}, {out / "metrics.csv"});
}

std::string summary_csv(const ProtocolResult& r) {
  std::ostringstream os;
  os << std::setprecision(9) << "scheme,modality,metric,mean,std\n";
  const auto row = [&](const char* name, const MeanStd& m) {
    os << to_string(r.scheme) << ',' << to_string(r.modality) << ',' << name << ',' << m.mean << ',' << m.std << '\n';
  };
  row("mae_deg", r.summary.mae);
  row("rmse_deg", r.summary.rmse);
  row("r2", r.summary.r2);
  return os.str();
}

void cmd_protocol(const RunConfig& cfg) {
  const fs::path data = cfg.path("data");
  const fs::path out = prepare_out(cfg);
  const Entries entries = load_dataset(data);
  const Scheme scheme = parse_scheme(cfg.get("scheme"));
  ProtocolOptions po;
  po.aggregation = r2_aggregation(cfg);
  const ProtocolResult res = run_protocol(scheme, entries, cfg.model_spec(), cfg.train_config(), po);
  std::vector<fs::path> outputs;
  for (std::size_t k = 0; k < res.folds.size(); ++k) {
    const auto& f = res.folds[k];
    const int fold = f.split.fold_or_test_session;
    const std::string tag = "fold" + std::to_string(fold);
    write_text(out / ("report_" + tag + ".csv"), metrics_csv_header() + metrics_csv_rows(scheme, fold, f.report));
    write_file(out / ("model_" + tag + ".ckpt"), nn::serialize_checkpoint(f.checkpoint));
    write_text(out / ("history_" + tag + ".csv"), history_csv(f.history));
    for (const char* kind : {"report_", "model_", "history_"}) {
      outputs.push_back(out / (kind + tag + (std::string(kind) == "model_" ? ".ckpt" : ".csv")));
    }
  }
  write_text(out / "summary.csv", summary_csv(res));
  const std::string table = format_table(std::string(to_string(scheme)) + " cross-validation",
                                         {TableColumn{std::string(to_string(res.modality)), res.summary}});
  write_text(out / "summary.txt", table);
  outputs.push_back(out / "summary.csv");
  outputs.push_back(out / "summary.txt");
  write_manifest(out, "protocol", cfg, {dataset_file(data)}, outputs);
  std::cout << table;
}

// Reads a protocol summary.csv back into a table column.
TableColumn read_summary(const fs::path& dir) {
  std::istringstream in(read_text(dir / "summary.csv"));
  std::string line;
  std::getline(in, line);
  TableColumn col;
  int rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string item;
    while (std::getline(ls, item, ',')) f.push_back(item);
    if (f.size() != 5) throw Error(ErrorCode::InvalidRecord, "malformed summary line in " + dir.string());
    col.name = f[1];
    const MeanStd m{std::stod(f[3]), std::stod(f[4])};
    if (f[2] == "mae_deg") col.summary.mae = m;
    else if (f[2] == "rmse_deg") col.summary.rmse = m;
    else if (f[2] == "r2") col.summary.r2 = m;
    else throw Error(ErrorCode::InvalidRecord, "unknown metric '" + f[2] + "' in " + dir.string());
    ++rows;
  }
  if (rows != 3) throw Error(ErrorCode::InvalidRecord, "summary in " + dir.string() + " needs three metrics");
  return col;
}

void cmd_report(const RunConfig& cfg) {
  const fs::path out = prepare_out(cfg);
  std::vector<fs::path> inputs, outputs;
  bool did_something = false;

  if (!cfg.get("runs").empty()) {
    std::vector<TableColumn> cols;
    std::istringstream in(cfg.get("runs"));
    std::string item;
    while (std::getline(in, item, ',')) {
      cols.push_back(read_summary(item));
      inputs.push_back(fs::path(item) / "summary.csv");
    }
    write_text(out / "table.txt", format_table(cfg.get("scheme") + " cross-validation", cols));
    outputs.push_back(out / "table.txt");
    did_something = true;
  }

  if (!cfg.get("checkpoint").empty()) {
    const fs::path data = cfg.path("data");
    const Entries entries = load_dataset(data);
    const Scheme scheme = parse_scheme(cfg.get("scheme"));
    const int fold = static_cast<int>(cfg.get_int("fold"));
    const SplitSpec split = make_split(scheme, fold);
    Model<float> model = load_model(cfg);
    const double smooth_ms = cfg.get_double("report.smooth_ms");
    const int window = smooth_ms > 0.0 ? median_window_entries(smooth_ms) : 1;

    std::ostringstream os;
    os << std::setprecision(7) << "session,set,t_end_us";
    for (const auto& n : joint_names()) os << ",true_" << n << ",pred_" << n << ",smooth_" << n;
    os << '\n';
    for (const SetRef& s : split.test) {
      EntryRefs refs = select(entries, std::span<const SetRef>(&s, 1));
      if (refs.empty()) continue;
      std::stable_sort(refs.begin(), refs.end(), [](auto* a, auto* b) { return a->t_end_us < b->t_end_us; });
      const Eigen::MatrixXd pred = predict(model, refs);
      const Eigen::MatrixXd smooth = median_smooth(pred, window);
      const Eigen::MatrixXd truth = labels_of(refs);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        os << s.session_id << ',' << s.set_id << ',' << refs[i]->t_end_us;
        for (int j = 0; j < kJoints; ++j) os << ',' << truth(r, j) << ',' << pred(r, j) << ',' << smooth(r, j);
        os << '\n';
      }
    }
    write_text(out / "curves.csv", os.str());
    outputs.push_back(out / "curves.csv");
    inputs.push_back(dataset_file(data));
    inputs.push_back(cfg.path("checkpoint"));
    did_something = true;
  }
  if (!did_something) usage("report needs runs (protocol directories) and/or a checkpoint");
  write_manifest(out, "report", cfg, inputs, outputs);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Multimodal EMG + ultrasound hand-pose pipeline", "musefuse"};
  app.require_subcommand(1, 1);

  struct Flags {
    std::string config, out, scheme, modality, data, checkpoint;
    std::int64_t seed = 0;
    int fold = 0;
    std::vector<std::string> sets;
  };
  Flags f;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "Generate a synthetic corpus"},
      {"align", "Align every set of a corpus and report residuals"},
      {"build-dataset", "Window a corpus into dataset.bin"},
      {"train", "Train one fold"},
      {"eval", "Evaluate a checkpoint on one fold's test sets"},
      {"protocol", "Train and evaluate every fold of a scheme"},
      {"report", "Table over protocol runs and/or prediction curves"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", f.config, "key = value config file");
    sub->add_option("--seed", f.seed, "Run seed");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--scheme", f.scheme, "aggregated | intersession");
    sub->add_option("--modality", f.modality, "emg | us | fusion");
    sub->add_option("--data", f.data, "Corpus root or dataset");
    sub->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
    sub->add_option("--fold", f.fold, "Fold (aggregated) or test session (intersession)");
    sub->add_option("--set", f.sets, "Override any config key: KEY=VALUE");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return kExitOk;
    }
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "musefuse: error=UsageError exit=1 reason=" << msg << '\n';
    return kExitUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    RunConfig cfg;
    if (!f.config.empty()) cfg.merge_text(read_text(f.config), f.config);
    auto flag = [&](const char* name, const std::string& key, const std::string& value) {
      if (sub->count(name) > 0) cfg.set(key, value);
    };
    flag("--seed", "seed", std::to_string(f.seed));
    flag("--out", "out", f.out);
    flag("--scheme", "scheme", f.scheme);
    flag("--modality", "modality", f.modality);
    flag("--data", "data", f.data);
    flag("--checkpoint", "checkpoint", f.checkpoint);
    flag("--fold", "fold", std::to_string(f.fold));
    for (const auto& kv : f.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) usage("--set expects KEY=VALUE, got '" + kv + "'");
      cfg.set(trim(std::string_view(kv).substr(0, eq)), trim(std::string_view(kv).substr(eq + 1)));
    }
    cfg.resolve_paths();

    if (command == "synth") cmd_synth(cfg);
    else if (command == "align") cmd_align(cfg);
    else if (command == "build-dataset") cmd_build_dataset(cfg);
    else if (command == "train") cmd_train(cfg);
    else if (command == "eval") cmd_eval(cfg);
    else if (command == "protocol") cmd_protocol(cfg);
    else cmd_report(cfg);
    return kExitOk;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    const int code = exit_code_for(e.code());
    std::cerr << "musefuse: error=" << to_string(e.code()) << " exit=" << code << " reason=" << msg << '\n';
    return code;
  } catch (const std::exception& e) {
    std::cerr << "musefuse: error=IoError exit=2 reason=" << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace musefuse::cli
