#include "pelta/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace pelta {

Dataset gen_data(std::size_t classes, std::size_t per_class, std::size_t image,
                 std::size_t channels, double noise, std::uint64_t seed) {
  if (classes < 2) throw Error("gen_data: need at least 2 classes");
  if (image == 0 || channels == 0) throw Error("gen_data: invalid geometry");
  Rng rng(seed);
  Dataset out;
  const double tau = 2.0 * 3.14159265358979323846;
  // Interleave classes: sample s of the dataset belongs to class s % classes.
  for (std::size_t s = 0; s < per_class * classes; ++s) {
    const std::size_t k = s % classes;
    const double freq = 2.0 + static_cast<double>(k / 4);
    const std::size_t orient = k % 4;
    Tensor img(Shape{channels, image, image});
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < image; ++y)
        for (std::size_t x = 0; x < image; ++x) {
          const double fy = freq * static_cast<double>(y) / static_cast<double>(image);
          const double fx = freq * static_cast<double>(x) / static_cast<double>(image);
          double base = 0;
          switch (orient) {
            case 0: base = std::cos(tau * fy); break;                      // horizontal stripes
            case 1: base = std::cos(tau * fx); break;                      // vertical stripes
            case 2: base = std::cos(tau * fy) * std::cos(tau * fx); break; // checkerboard
            case 3: base = std::cos(tau * (fx + fy)); break;               // diagonal stripes
          }
          const double v = 0.5 + 0.4 * base + rng.uniform(-noise, noise);
          img.at(c, y, x) = std::min(1.0, std::max(0.0, v));
        }
    out.images.push_back(std::move(img));
    out.labels.push_back(static_cast<int>(k));
  }
  return out;
}

void save_dataset(const std::string& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["samples"] = d.size();
  if (d.size() > 0) {
    const Shape& s = d.images[0].shape();
    Tensor images(Shape{d.size(), s[0], s[1], s[2]});
    Tensor labels(Shape{d.size()});
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.images[i].shape() != s) throw Error("save_dataset: heterogeneous sample shapes");
      std::copy(d.images[i].data().begin(), d.images[i].data().end(),
                images.data().begin() + i * d.images[i].numel());
      labels[i] = d.labels[i];
    }
    save_tensor(dir + "/images.pelt", images);
    save_tensor(dir + "/labels.pelt", labels);
    meta["channels"] = s[0];
    meta["image"] = s[1];
    meta["layout"] = "NxCxHxW";
  }
  write_file(dir + "/meta.json", meta.dump(2));
}

Dataset load_dataset(const std::string& dir) {
  Dataset d;
  if (!std::filesystem::exists(dir + "/images.pelt")) return d;
  const Tensor images = load_tensor(dir + "/images.pelt");
  const Tensor labels = load_tensor(dir + "/labels.pelt");
  if (images.rank() != 4) throw Error("load_dataset: images must be N x C x H x W");
  const std::size_t n = images.extent(0);
  if (labels.numel() != n) throw Error("load_dataset: label count does not match images");
  const std::size_t numel = images.numel() / n;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Scalar> sample(images.data().begin() + i * numel,
                               images.data().begin() + (i + 1) * numel);
    d.images.emplace_back(Shape{images.extent(1), images.extent(2), images.extent(3)},
                          std::move(sample));
    d.labels.push_back(static_cast<int>(labels[i]));
  }
  return d;
}

// ---- config parsing ----

namespace {

struct ConfigReader {
  // section -> key -> (value, line). The empty section holds top-level keys.
  std::map<std::string, std::map<std::string, std::pair<std::string, std::size_t>>> kv;

  void parse(const std::string& text) {
    std::stringstream ss(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::stringstream ls(line);
      std::string a, bb, extra;
      if (!(ls >> a)) continue;
      if (a == "}") {
        if (section.empty())
          throw ConfigError("config line " + std::to_string(line_no) + ": unmatched '}'");
        section.clear();
        continue;
      }
      if (!(ls >> bb))
        throw ConfigError("config line " + std::to_string(line_no) + ": key '" + a +
                          "' has no value");
      if (bb == "{") {
        if (!section.empty())
          throw ConfigError("config line " + std::to_string(line_no) +
                            ": nested sections are not supported");
        std::string rest;
        if (ls >> rest)
          throw ConfigError("config line " + std::to_string(line_no) +
                            ": '" + rest + "' after '{' (one key per line)");
        section = a;
        continue;
      }
      if (ls >> extra)
        throw ConfigError("config line " + std::to_string(line_no) + ": trailing token '" +
                          extra + "'");
      if (!kv[section].emplace(a, std::make_pair(bb, line_no)).second)
        throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + a +
                          "' in section '" + section + "'");
    }
    if (!section.empty()) throw ConfigError("config: unclosed section '" + section + "'");
  }

  template <typename T>
  void take(const std::string& section, const std::string& key, T& into) {
    auto sit = kv.find(section);
    if (sit == kv.end()) return;
    auto it = sit->second.find(key);
    if (it == sit->second.end()) return;
    const auto& [val, line] = it->second;
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        into = val;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (val == "on" || val == "true") into = true;
        else if (val == "off" || val == "false") into = false;
        else throw std::invalid_argument("expected on/off");
      } else if constexpr (std::is_same_v<T, double>) {
        std::size_t used = 0;
        into = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument("not a number");
      } else if constexpr (std::is_same_v<T, ShieldSetting>) {
        if (val == "none") into = ShieldSetting::None;
        else if (val == "vit") into = ShieldSetting::VitOnly;
        else if (val == "cnn") into = ShieldSetting::CnnOnly;
        else if (val == "ensemble") into = ShieldSetting::Ensemble;
        else throw std::invalid_argument("expected none/vit/cnn/ensemble");
      } else {
        std::size_t used = 0;
        const unsigned long long raw = std::stoull(val, &used);
        if (used != val.size()) throw std::invalid_argument("not an integer");
        into = static_cast<T>(raw);
      }
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(line) + ": field '" +
                        (section.empty() ? key : section + "." + key) + "': bad value '" + val +
                        "' (" + e.what() + ")");
    }
    sit->second.erase(it);
  }

  void finish() const {
    for (const auto& [section, keys] : kv)
      for (const auto& [key, vl] : keys)
        throw ConfigError("config line " + std::to_string(vl.second) + ": unknown field '" +
                          (section.empty() ? key : section + "." + key) + "'");
  }
};

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ConfigReader r;
  r.parse(text);
  ExperimentConfig c;

  r.take("", "seed", c.seed);
  r.take("", "out", c.out);
  r.take("", "workers", c.workers);

  r.take("dataset", "classes", c.classes);
  r.take("dataset", "per_class", c.per_class);
  r.take("dataset", "image", c.image);
  r.take("dataset", "channels", c.channels);
  r.take("dataset", "noise", c.noise);

  r.take("vit", "patch", c.vit.patch);
  r.take("vit", "width", c.vit.width);
  r.take("vit", "blocks", c.vit.blocks);
  r.take("vit", "heads", c.vit.heads);
  r.take("vit", "ff_mult", c.vit.ff_mult);

  r.take("cnn", "filters", c.cnn.filters);
  r.take("cnn", "kernel", c.cnn.kernel);
  r.take("cnn", "conv_stride", c.cnn.conv_stride);
  r.take("cnn", "pool", c.cnn.pool);
  r.take("cnn", "pool_stride", c.cnn.pool_stride);
  r.take("cnn", "hidden", c.cnn.hidden);

  r.take("train", "lr", c.train_vit.lr);
  r.take("train", "epochs", c.train_vit.epochs);
  r.take("train", "batch", c.train_vit.batch);
  c.train_cnn = c.train_vit;
  r.take("train", "vit_lr", c.train_vit.lr);
  r.take("train", "vit_epochs", c.train_vit.epochs);
  r.take("train", "cnn_lr", c.train_cnn.lr);
  r.take("train", "cnn_epochs", c.train_cnn.epochs);

  r.take("attack", "eps_step", c.attack.eps_step);
  r.take("attack", "steps", c.attack.steps);
  r.take("attack", "alpha_k", c.attack.alpha_k);
  r.take("attack", "upsample", c.attack.upsample);
  r.take("attack", "repeats", c.repeats);
  r.take("attack", "samples", c.attack_samples);

  r.take("fl", "enabled", c.fl_enabled);
  r.take("fl", "clients", c.fl.clients);
  r.take("fl", "rounds", c.fl.rounds);
  r.take("fl", "local_epochs", c.fl.local_epochs);
  r.take("fl", "batch", c.fl.batch);
  r.take("fl", "lr", c.fl.lr);
  r.take("fl", "compromised", c.fl.compromised);
  r.take("fl", "shield", c.fl.shield);
  r.take("fl", "attack_samples", c.fl.attack_samples);
  r.finish();

  // Geometry flows from the dataset; the model sections only tune capacity.
  c.vit.image = c.image;
  c.vit.channels = c.channels;
  c.vit.classes = c.classes;
  c.cnn.image = c.image;
  c.cnn.channels = c.channels;
  c.cnn.classes = c.classes;
  c.train_vit.seed = Rng::derive(c.seed, 0x7a1);
  c.train_cnn.seed = Rng::derive(c.seed, 0x7a2);
  c.attack.seed = Rng::derive(c.seed, 0x7a3);
  c.fl.seed = Rng::derive(c.seed, 0x7a4);
  c.fl.attack = c.attack;
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  return parse_config(read_file(path));
}

std::string default_config_text() {
  return R"(# Pelta toy experiment
seed 42
out out
workers 1

dataset {
  classes 4
  per_class 16
  image 16
  channels 1
  noise 0.1
}

vit {
  patch 4
  width 16
  blocks 2
  heads 2
}

cnn {
  filters 8
  kernel 3
  pool 2
  hidden 32
}

train {
  lr 0.1
  epochs 30
  batch 16
}

attack {
  eps_step 0.01
  steps 10
  alpha_k 0.5
  repeats 2
  upsample on
  samples 64
}
)";
}

void write_file(const std::string& path, const std::string& content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string memory_report_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  auto add_entry = [&](const std::string& name, const BuiltModel& m) {
    const Enclave e = shield(m.graph, m.canonical_shield);
    const MemoryReport r = memory_report(m.graph, e);
    j[name] = nlohmann::ordered_json::parse(r.to_json());
    j[name]["total_mb"] = static_cast<double>(r.total_bytes) / 1e6;
  };
  add_entry("vit_toy", build_tiny_vit(cfg.vit));
  add_entry("cnn_toy", build_tiny_cnn(cfg.cnn));
  add_entry("vit_l16_geometry", build_tiny_vit(vit_l16_geometry()));
  return j.dump(2);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const Dataset* imported) {
  std::filesystem::create_directories(out_dir);
  const Dataset data =
      imported ? *imported
               : gen_data(cfg.classes, cfg.per_class, cfg.image, cfg.channels, cfg.noise,
                          Rng::derive(cfg.seed, 0xda7a));

  EnsembleModel ensemble{build_tiny_vit(cfg.vit), build_tiny_cnn(cfg.cnn), {}, {}};
  Rng vit_init(Rng::derive(cfg.seed, 0x111));
  Rng cnn_init(Rng::derive(cfg.seed, 0x222));
  ensemble.vit_params = init_params(ensemble.vit, vit_init);
  ensemble.cnn_params = init_params(ensemble.cnn, cnn_init);

  const TrainResult vit_res = train_sgd(ensemble.vit, ensemble.vit_params, data, cfg.train_vit);
  const TrainResult cnn_res = train_sgd(ensemble.cnn, ensemble.cnn_params, data, cfg.train_cnn);

  save_params(out_dir + "/params/vit", ensemble.vit, ensemble.vit_params);
  save_params(out_dir + "/params/cnn", ensemble.cnn, ensemble.cnn_params);

  Dataset attacked;
  const std::size_t n_attack = std::min(cfg.attack_samples, data.size());
  for (std::size_t i = 0; i < n_attack; ++i) {
    attacked.images.push_back(data.images[i]);
    attacked.labels.push_back(data.labels[i]);
  }

  const AttackReport report =
      evaluate_grid(ensemble, attacked, cfg.attack, cfg.repeats, Rng::derive(cfg.seed, 0x97d),
                    cfg.workers);
  write_file(out_dir + "/report.csv", report.to_csv());

  nlohmann::ordered_json rj = nlohmann::ordered_json::parse(report.to_json());
  rj["clean_train"] = {{"vit", vit_res.clean_accuracy}, {"cnn", cnn_res.clean_accuracy}};
  rj["config"] = {{"seed", cfg.seed},
                  {"samples", n_attack},
                  {"repeats", cfg.repeats},
                  {"eps_step", cfg.attack.eps_step},
                  {"steps", cfg.attack.steps},
                  {"alpha_k", cfg.attack.alpha_k}};
  write_file(out_dir + "/report.json", rj.dump(2));

  write_file(out_dir + "/memory.json", memory_report_json(cfg));

  if (cfg.fl_enabled) {
    const FlResult fl = run_rounds(cfg.fl, cfg.vit, cfg.cnn, data, data);
    write_file(out_dir + "/fl.jsonl", roundlog_jsonl(fl.rounds));
  }

  return ExperimentResult{vit_res.clean_accuracy, cnn_res.clean_accuracy, report};
}

}  // namespace pelta
