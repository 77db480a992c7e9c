#include "core/model.hpp"

#include <cmath>
#include <map>

#include "core/container.hpp"

namespace colidr {

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::Cbm: return "cbm";
    case Ablation::NoDrc: return "no_drc";
    case Ablation::VanillaVae: return "vanilla_vae";
  }
  return "?";
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "none") return Ablation::None;
  if (name == "cbm") return Ablation::Cbm;
  if (name == "no_drc") return Ablation::NoDrc;
  if (name == "vanilla_vae") return Ablation::VanillaVae;
  fail(ErrorKind::InvalidArgument, "unknown ablation '" + name + "'");
}

double ModelConfig::effective_beta() const {
  switch (ablation) {
    case Ablation::VanillaVae: return 1.0;
    case Ablation::Cbm: return 0.0;
    default: return beta;
  }
}

void ModelConfig::validate() const {
  CLDR_CHECK(image_size == 16 || image_size == 32 || image_size == 64,
             ErrorKind::InvalidArgument, "config: image_size must be 16, 32 or 64");
  CLDR_CHECK(latent >= 2, ErrorKind::InvalidArgument, "config: latent must be >= 2");
  CLDR_CHECK(n_total >= n_annotated && n_annotated >= 1, ErrorKind::InvalidArgument,
             "config: need 1 <= n_annotated <= n_total");
  CLDR_CHECK(task_classes >= 2, ErrorKind::InvalidArgument,
             "config: task_classes must be >= 2");
  CLDR_CHECK(beta >= 0.0, ErrorKind::InvalidArgument, "config: beta must be >= 0");
}

Model::Model(const ModelConfig& c, std::uint64_t init_seed) : cfg(c) {
  cfg.validate();
  Rng rng = Rng::substream(init_seed, "init");
  vae = Vae(VaeConfig{c.image_size, c.latent, c.filters}, rng);
  if (c.ablation == Ablation::Cbm) {
    cbm_concepts = LinearLayer("cbm.concepts", c.latent, c.n_total, rng);
  } else {
    aggdec = AggDec(AggDecConfig{c.latent, c.n_total, c.n_annotated, c.agg_hidden}, rng);
  }
  head = TaskHead(c.n_annotated, c.task_classes, rng);
}

Model::Forward Model::forward(Tape& t, Value x, const Tensor& noise, bool training,
                              bool update_stats) {
  Forward out;
  out.post = vae.encode(t, x, training, update_stats);
  if (is_cbm() || !training) {
    out.z = out.post.mu;  // deterministic bottleneck
  } else {
    out.z = reparameterize(t, out.post, noise);
  }
  out.x_hat = vae.decode(t, out.z, training, update_stats);
  if (is_cbm()) {
    out.logits = cbm_concepts.forward(t, out.z);
    out.scores = sigmoid(out.logits);
  } else {
    AggDec::Aggregated agg = aggdec.aggregate(t, out.z);
    out.z_prime = agg.z_prime;
    out.logits = agg.logits;
    out.scores = agg.scores;
    out.z_hat = aggdec.decompose(t, out.scores).z_hat;
  }
  out.pred = head.predict(t, out.scores);
  return out;
}

Value Model::scores_from_latent(Tape& t, Value z) const {
  if (is_cbm()) return sigmoid(cbm_concepts.forward(t, z));
  return aggdec.aggregate(t, z).scores;
}

ParamRefs Model::params() {
  ParamRefs all = vae_params();
  ParamRefs rest = concept_params();
  all.insert(all.end(), rest.begin(), rest.end());
  ParamRefs hp = head_params();
  all.insert(all.end(), hp.begin(), hp.end());
  return all;
}

ParamRefs Model::vae_params() {
  ParamRefs out;
  vae.collect(out);
  return out;
}

ParamRefs Model::concept_params() {
  ParamRefs out;
  if (is_cbm())
    cbm_concepts.collect(out);
  else
    aggdec.collect(out);
  return out;
}

ParamRefs Model::head_params() {
  ParamRefs out;
  head.collect(out);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing: every parameter plus BatchNorm running statistics plus one
// meta tensor describing the architecture, all in the CLDR container.
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kMetaName = "meta.arch";
}

void Model::save(const std::string& path) const {
  std::vector<NamedTensor> entries;
  Tensor meta({11});
  meta.data = {static_cast<double>(cfg.image_size),
               static_cast<double>(cfg.latent),
               static_cast<double>(cfg.n_total),
               static_cast<double>(cfg.n_annotated),
               static_cast<double>(cfg.task_classes),
               static_cast<double>(cfg.filters[0]),
               static_cast<double>(cfg.filters[1]),
               static_cast<double>(cfg.filters[2]),
               static_cast<double>(cfg.agg_hidden),
               cfg.beta,
               static_cast<double>(cfg.ablation)};
  entries.push_back({kMetaName, std::move(meta)});
  Model& self = const_cast<Model&>(*this);
  for (Parameter* p : self.params()) entries.push_back({p->name, p->value});
  for (auto& [name, tensor] : self.vae.stat_tensors()) entries.push_back({name, *tensor});
  write_tensor_container(path, entries);
}

Model Model::load(const std::string& path) {
  auto entries = read_tensor_container(path);
  std::map<std::string, Tensor*> by_name;
  for (auto& e : entries) by_name[e.name] = &e.tensor;

  auto it = by_name.find(kMetaName);
  CLDR_CHECK(it != by_name.end() && it->second->numel() == 11, ErrorKind::Format,
             path << ": not a model checkpoint (missing " << kMetaName << ")");
  const auto& m = it->second->data;
  ModelConfig cfg;
  cfg.image_size = static_cast<int>(m[0]);
  cfg.latent = static_cast<int>(m[1]);
  cfg.n_total = static_cast<int>(m[2]);
  cfg.n_annotated = static_cast<int>(m[3]);
  cfg.task_classes = static_cast<int>(m[4]);
  cfg.filters = {static_cast<int>(m[5]), static_cast<int>(m[6]), static_cast<int>(m[7])};
  cfg.agg_hidden = static_cast<int>(m[8]);
  cfg.beta = m[9];
  cfg.ablation = static_cast<Ablation>(static_cast<int>(m[10]));

  Model model(cfg, 0);
  for (Parameter* p : model.params()) {
    auto pit = by_name.find(p->name);
    CLDR_CHECK(pit != by_name.end(), ErrorKind::Format,
               path << ": checkpoint missing parameter '" << p->name << "'");
    CLDR_CHECK(pit->second->shape == p->value.shape, ErrorKind::Format,
               path << ": parameter '" << p->name << "' has shape "
                    << shape_str(pit->second->shape) << ", expected "
                    << shape_str(p->value.shape));
    p->value = *pit->second;
    p->value.requires_grad = true;
    p->zero_grad();
  }
  for (auto& [name, tensor] : model.vae.stat_tensors()) {
    auto sit = by_name.find(name);
    CLDR_CHECK(sit != by_name.end(), ErrorKind::Format,
               path << ": checkpoint missing statistics '" << name << "'");
    *tensor = *sit->second;
  }
  return model;
}

}  // namespace colidr
