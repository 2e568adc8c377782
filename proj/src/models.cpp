#include "pelta/models.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace pelta {

VitConfig vit_l16_geometry() {
  VitConfig cfg;
  cfg.image = 224;
  cfg.channels = 3;
  cfg.patch = 16;
  cfg.width = 1024;
  cfg.blocks = 24;
  cfg.heads = 16;
  cfg.classes = 10;
  return cfg;
}

BuiltModel build_tiny_vit(const VitConfig& cfg) {
  if (cfg.patch == 0 || cfg.image % cfg.patch != 0)
    throw GraphError("vit: patch size must divide the image size");
  if (cfg.heads == 0 || cfg.width % cfg.heads != 0)
    throw GraphError("vit: width must be divisible by the head count");
  if (cfg.blocks == 0 || cfg.classes < 2 || cfg.channels == 0)
    throw GraphError("vit: invalid config");

  const std::size_t P = cfg.patch, D = cfg.width;
  const std::size_t grid = cfg.image / P;
  const std::size_t n_patches = grid * grid;
  const std::size_t tokens = n_patches + 1;
  const std::size_t dh = D / cfg.heads;
  const std::size_t ff = cfg.ff_mult * D;

  GraphBuilder b;
  std::map<NodeId, std::string> names;
  auto param = [&](Shape s, std::string name) {
    const NodeId id = b.parameter(std::move(s));
    names[id] = std::move(name);
    return id;
  };

  const NodeId x = b.input({cfg.channels, cfg.image, cfg.image}, /*attack_surface=*/true);
  const NodeId y = b.input({cfg.classes});
  const NodeId embed = param({P * P * cfg.channels, D}, "E");
  const NodeId x_class = param({1, D}, "x_class");
  const NodeId e_pos = param({tokens, D}, "E_pos");

  struct BlockParams {
    std::vector<NodeId> wq, wk, wv;
    NodeId wo, w1, b1, w2, b2;
  };
  std::vector<BlockParams> bp(cfg.blocks);
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    const std::string pre = "blk" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string hp = pre + "h" + std::to_string(h) + ".";
      bp[l].wq.push_back(param({D, dh}, hp + "Wq"));
      bp[l].wk.push_back(param({D, dh}, hp + "Wk"));
      bp[l].wv.push_back(param({D, dh}, hp + "Wv"));
    }
    bp[l].wo = param({D, D}, pre + "Wo");
    bp[l].w1 = param({D, ff}, pre + "W1");
    bp[l].b1 = param({1, ff}, pre + "b1");
    bp[l].w2 = param({ff, D}, pre + "W2");
    bp[l].b2 = param({1, D}, pre + "b2");
  }
  const NodeId w_head = param({D, cfg.classes}, "W_head");
  const NodeId b_head = param({1, cfg.classes}, "b_head");

  // z0 = [x_class; x_p E] + E_pos; these four transforms are the canonical
  // shield placement.
  OpAttrs pa;
  pa.patch = P;
  const NodeId p1 = b.op(OpKind::Patchify, {x}, pa);
  const NodeId p2 = b.op(OpKind::MatMul, {p1, embed});
  const NodeId p3 = b.op(OpKind::ConcatRows, {x_class, p2});
  const NodeId z0 = b.op(OpKind::Add, {p3, e_pos});

  OpAttrs ln;
  ln.eps = cfg.ln_eps;
  OpAttrs sc;
  sc.c = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::vector<NodeId>> attention(cfg.blocks);
  NodeId cur = z0;
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    const NodeId ln1 = b.op(OpKind::LayerNorm, {cur}, ln);
    std::vector<NodeId> head_out;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const NodeId q = b.op(OpKind::MatMul, {ln1, bp[l].wq[h]});
      const NodeId k = b.op(OpKind::MatMul, {ln1, bp[l].wk[h]});
      const NodeId v = b.op(OpKind::MatMul, {ln1, bp[l].wv[h]});
      const NodeId kt = b.op(OpKind::Transpose, {k});
      const NodeId s = b.op(OpKind::MatMul, {q, kt});
      const NodeId ss = b.op(OpKind::Scale, {s}, sc);
      const NodeId att = b.op(OpKind::RowSoftmax, {ss});
      attention[l].push_back(att);
      head_out.push_back(b.op(OpKind::MatMul, {att, v}));
    }
    const NodeId cat = cfg.heads == 1 ? head_out[0] : b.op(OpKind::ConcatCols, head_out);
    const NodeId proj = b.op(OpKind::MatMul, {cat, bp[l].wo});
    const NodeId res1 = b.op(OpKind::Add, {cur, proj});
    const NodeId ln2 = b.op(OpKind::LayerNorm, {res1}, ln);
    const NodeId f1 = b.op(OpKind::MatMul, {ln2, bp[l].w1});
    const NodeId f1b = b.op(OpKind::AddRowBroadcast, {f1, bp[l].b1});
    const NodeId act = b.op(OpKind::Tanh, {f1b});
    const NodeId f2 = b.op(OpKind::MatMul, {act, bp[l].w2});
    const NodeId f2b = b.op(OpKind::AddRowBroadcast, {f2, bp[l].b2});
    cur = b.op(OpKind::Add, {res1, f2b});
  }

  OpAttrs row0;
  row0.row = 0;
  const NodeId cls = b.op(OpKind::TakeRow, {cur}, row0);
  const NodeId logits = b.op(OpKind::MatMul, {cls, w_head});
  const NodeId logits_b = b.op(OpKind::Add, {logits, b_head});
  const NodeId loss = b.op(OpKind::SoftmaxCrossEntropy, {logits_b, y});

  std::vector<NodeId> params;
  for (NodeId id = 1; id <= static_cast<NodeId>(b.leaves().size()); ++id)
    if (b.leaves()[id - 1].kind == LeafKind::Parameter) params.push_back(id);

  Graph g = std::move(b).build(loss);
  Selection shield_sel = select(g, {p1, p2, p3, z0});
  return BuiltModel{ModelKind::Vit,
                    std::move(g),
                    std::move(shield_sel),
                    x,
                    y,
                    logits_b,
                    std::move(attention),
                    std::move(params),
                    std::move(names),
                    P,
                    {cfg.channels, cfg.image, cfg.image},
                    cfg.classes};
}

BuiltModel build_tiny_cnn(const CnnConfig& cfg) {
  if (cfg.kernel == 0 || cfg.kernel > cfg.image || cfg.conv_stride == 0)
    throw GraphError("cnn: invalid convolution geometry");
  const std::size_t ch = (cfg.image - cfg.kernel) / cfg.conv_stride + 1;
  if (cfg.pool == 0 || cfg.pool > ch || cfg.pool_stride == 0)
    throw GraphError("cnn: invalid pooling geometry");
  if (cfg.classes < 2 || cfg.filters == 0 || cfg.hidden == 0 || cfg.channels == 0)
    throw GraphError("cnn: invalid config");
  const std::size_t hp = (ch - cfg.pool) / cfg.pool_stride + 1;
  const std::size_t flat = cfg.filters * hp * hp;

  GraphBuilder b;
  std::map<NodeId, std::string> names;
  auto param = [&](Shape s, std::string name) {
    const NodeId id = b.parameter(std::move(s));
    names[id] = std::move(name);
    return id;
  };

  const NodeId x = b.input({cfg.channels, cfg.image, cfg.image}, /*attack_surface=*/true);
  const NodeId y = b.input({cfg.classes});
  const NodeId w_conv = param({cfg.filters, cfg.channels, cfg.kernel, cfg.kernel}, "W_conv");
  const NodeId w1 = param({flat, cfg.hidden}, "W1");
  const NodeId b1 = param({1, cfg.hidden}, "b1");
  const NodeId w2 = param({cfg.hidden, cfg.hidden}, "W2");
  const NodeId b2 = param({1, cfg.hidden}, "b2");
  const NodeId w3 = param({cfg.hidden, cfg.classes}, "W3");
  const NodeId b3 = param({1, cfg.classes}, "b3");

  // First weight-standardized convolution and its max-pooling: the canonical
  // shield placement.
  OpAttrs ws;
  ws.eps = cfg.ws_eps;
  const NodeId std_w = b.op(OpKind::WeightStandardize, {w_conv}, ws);
  OpAttrs ca;
  ca.stride = cfg.conv_stride;
  const NodeId conv = b.op(OpKind::Conv2d, {x, std_w}, ca);
  OpAttrs pl;
  pl.kernel = cfg.pool;
  pl.stride = cfg.pool_stride;
  const NodeId pool = b.op(OpKind::MaxPool2d, {conv}, pl);

  const NodeId act0 = b.op(OpKind::Relu, {pool});
  OpAttrs rs;
  rs.target = {1, flat};
  const NodeId flat_n = b.op(OpKind::Reshape, {act0}, rs);
  const NodeId f1 = b.op(OpKind::MatMul, {flat_n, w1});
  const NodeId f1b = b.op(OpKind::Add, {f1, b1});
  const NodeId a1 = b.op(OpKind::Relu, {f1b});
  const NodeId f2 = b.op(OpKind::MatMul, {a1, w2});
  const NodeId f2b = b.op(OpKind::Add, {f2, b2});
  const NodeId a2 = b.op(OpKind::Relu, {f2b});
  const NodeId res = b.op(OpKind::Add, {a1, a2});  // plain residual add
  const NodeId head = b.op(OpKind::MatMul, {res, w3});
  const NodeId head_b = b.op(OpKind::Add, {head, b3});
  const NodeId loss = b.op(OpKind::SoftmaxCrossEntropy, {head_b, y});

  std::vector<NodeId> params;
  for (NodeId id = 1; id <= static_cast<NodeId>(b.leaves().size()); ++id)
    if (b.leaves()[id - 1].kind == LeafKind::Parameter) params.push_back(id);

  Graph g = std::move(b).build(loss);
  Selection shield_sel = select(g, {std_w, conv, pool});
  return BuiltModel{ModelKind::Cnn,
                    std::move(g),
                    std::move(shield_sel),
                    x,
                    y,
                    head_b,
                    {},
                    std::move(params),
                    std::move(names),
                    0,
                    {cfg.channels, cfg.image, cfg.image},
                    cfg.classes};
}

ParamStore init_params(const BuiltModel& m, Rng& rng) {
  ParamStore store;
  for (NodeId id : m.params) {
    const Shape& s = m.graph.shape(id);
    const std::string& name = m.param_names.at(id);
    Tensor t(s);
    const std::string base = name.substr(name.rfind('.') + 1);
    if (name == "x_class" || name == "E_pos") {
      for (Scalar& v : t.data()) v = rng.uniform(-0.02, 0.02);
    } else if (!base.empty() && base[0] == 'b') {
      // bias rows start at zero
    } else {
      std::size_t fan_in = s[0];
      if (s.size() == 4) fan_in = s[1] * s[2] * s[3];
      const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Scalar& v : t.data()) v = rng.uniform(-r, r);
    }
    store.emplace(id, std::move(t));
  }
  return store;
}

Tensor one_hot(std::size_t classes, std::size_t label) {
  if (label >= classes)
    throw Error("label " + std::to_string(label) + " out of range for " +
                std::to_string(classes) + " classes");
  Tensor t(Shape{classes});
  t[label] = 1.0;
  return t;
}

Bindings bind_sample(const BuiltModel& m, const ParamStore& params, const Tensor& image,
                     std::size_t label) {
  Bindings b;
  b.emplace(m.input, image);
  b.emplace(m.target, one_hot(m.classes, label));
  for (const auto& [id, t] : params) b.emplace(id, t);
  return b;
}

int predict(const BuiltModel& m, const ParamStore& params, const Tensor& image) {
  const ValueMap v = forward(m.graph, bind_sample(m, params, image, 0));
  return static_cast<int>(argmax(v[m.logits]));
}

double accuracy(const BuiltModel& m, const ParamStore& params, const Dataset& data) {
  if (data.size() == 0) return 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (predict(m, params, data.images[i]) == data.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

int ensemble_predict(const EnsembleModel& m, const Tensor& image, Rng& rng) {
  const bool pick_vit = rng.uniform_int(0, 1) == 0;
  return pick_vit ? predict(m.vit, m.vit_params, image) : predict(m.cnn, m.cnn_params, image);
}

TrainResult train_sgd(const BuiltModel& m, ParamStore& params, const Dataset& data,
                      const TrainOptions& opt) {
  if (data.size() == 0) throw Error("train_sgd: empty dataset");
  for (const Tensor& img : data.images)
    if (img.shape() != m.graph.shape(m.input))
      throw GraphError("train_sgd: sample shape " + shape_str(img.shape()) +
                       " does not match model input " + shape_str(m.graph.shape(m.input)));

  Rng rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double last_loss = 0;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, i - 1))]);
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t stop = std::min(order.size(), start + opt.batch);
      ParamStore grads;
      for (NodeId id : m.params) grads.emplace(id, Tensor(m.graph.shape(id)));
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t idx = order[k];
        try {
          const ValueMap v = forward(
              m.graph, bind_sample(m, params, data.images[idx],
                                   static_cast<std::size_t>(data.labels[idx])));
          last_loss = v[m.graph.loss()][0];
          const AdjointMap a = backward(m.graph, v);
          for (NodeId id : m.params) grads[id] = add(grads[id], a[id]);
        } catch (const Error& e) {
          throw Error("training diverged (non-finite values): " + std::string(e.what()));
        }
      }
      const double step = opt.lr / static_cast<double>(stop - start);
      for (NodeId id : m.params) params[id] = sub(params[id], scale(grads[id], step));
    }
  }
  return TrainResult{accuracy(m, params, data), last_loss};
}

void save_params(const std::string& dir, const BuiltModel& m, const ParamStore& params) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt", std::ios::trunc);
  if (!manifest) throw Error("cannot write manifest in " + dir);
  for (NodeId id : m.params) {
    const std::string& name = m.param_names.at(id);
    const std::string file = name + ".pelt";
    save_tensor(dir + "/" + file, params.at(id));
    manifest << id << " " << name << " " << file << "\n";
  }
}

ParamStore load_params(const std::string& dir, const BuiltModel& m) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw Error("cannot read manifest in " + dir);
  ParamStore store;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    NodeId id;
    std::string name, file;
    if (!(ss >> id >> name >> file)) throw Error("malformed manifest line: " + line);
    Tensor t = load_tensor(dir + "/" + file);
    if (t.shape() != m.graph.shape(id))
      throw Error("parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                  shape_str(m.graph.shape(id)));
    store.emplace(id, std::move(t));
  }
  for (NodeId id : m.params)
    if (!store.count(id)) throw Error("manifest misses parameter node " + std::to_string(id));
  return store;
}

}  // namespace pelta
