#include "it3d/prompts.hpp"

#include <json.hpp>

#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace it3d {

namespace {

using json = nlohmann::json;

const std::vector<std::string> kSpecies = {"wolf", "dog",        "panda",      "fox",    "civet",
                                           "cat",  "red panda", "teddy bear", "rabbit", "koala"};
const std::vector<std::optional<std::string>> kItems = {
    "in a bathtub", "on a stone", "on books", "on a table", "on the lawn", "in a basket", std::nullopt};
const std::vector<std::optional<std::string>> kGadgets = {"a tie", "a cape", "sunglasses", "a scarf", std::nullopt};
const std::vector<std::optional<std::string>> kHats = {"beret",        "beanie", "cowboy hat", "straw hat",
                                                       "baseball cap", "tophat", "party hat",  "sombrero",
                                                       std::nullopt};

const std::vector<std::string> kFigures = {"a white man",   "a white woman",   "a boy",         "a girl",
                                           "an elderly man", "an elderly woman", "a black woman", "a black man",
                                           "Obama",          "Kobe"};
const std::vector<std::string> kPortraitHats = {"Santa hat", "peaked cap", "steampunk hat", "crown"};
const std::vector<std::string> kExpressions = {"laughing",
                                               "crying",
                                               "grinning",
                                               "singing",
                                               "shouting",
                                               "looking ahead with a very serious expression",
                                               "opening mouth wide in shock",
                                               "angry",
                                               "talking",
                                               "feeling sad"};

// Body and hat colours, spread in luminance so grayscale features can tell them apart.
const std::map<std::string, Eigen::Vector3d> kBodyColors = {
    {"wolf", {0.45, 0.47, 0.50}},       {"dog", {0.78, 0.56, 0.32}},        {"panda", {0.12, 0.12, 0.12}},
    {"fox", {0.90, 0.42, 0.10}},        {"civet", {0.35, 0.30, 0.25}},      {"cat", {0.85, 0.75, 0.55}},
    {"red panda", {0.65, 0.20, 0.08}},  {"teddy bear", {0.55, 0.35, 0.18}}, {"rabbit", {0.80, 0.80, 0.90}},
    {"koala", {0.60, 0.62, 0.66}},      {"a white man", {0.93, 0.80, 0.70}}, {"a white woman", {0.96, 0.84, 0.76}},
    {"a boy", {0.85, 0.68, 0.55}},      {"a girl", {0.90, 0.72, 0.62}},     {"an elderly man", {0.75, 0.70, 0.68}},
    {"an elderly woman", {0.82, 0.76, 0.74}}, {"a black woman", {0.40, 0.26, 0.18}},
    {"a black man", {0.30, 0.20, 0.14}}, {"Obama", {0.45, 0.32, 0.24}},     {"Kobe", {0.36, 0.24, 0.17}},
};

const std::map<std::string, Eigen::Vector3d> kHatColors = {
    {"beret", {0.10, 0.10, 0.35}},      {"beanie", {0.80, 0.10, 0.10}},     {"cowboy hat", {0.50, 0.30, 0.10}},
    {"straw hat", {0.90, 0.80, 0.45}},  {"baseball cap", {0.10, 0.40, 0.80}}, {"tophat", {0.05, 0.05, 0.05}},
    {"party hat", {0.90, 0.30, 0.70}},  {"sombrero", {0.20, 0.60, 0.20}},   {"Santa hat", {0.85, 0.05, 0.05}},
    {"peaked cap", {0.10, 0.15, 0.30}}, {"steampunk hat", {0.40, 0.25, 0.12}}, {"crown", {0.95, 0.78, 0.10}},
};

const std::string& required(const Keywords& k, const std::string& slot) {
  auto it = k.find(slot);
  if (it == k.end() || !it->second) throw std::invalid_argument("prompt keywords: missing '" + slot + "'");
  return *it->second;
}

std::optional<std::string> optional_slot(const Keywords& k, const std::string& slot) {
  auto it = k.find(slot);
  return it == k.end() ? std::nullopt : it->second;
}

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

}  // namespace

std::string animal_text(const Keywords& k) {
  std::string text = "a " + required(k, "species");
  std::vector<std::string> clauses;
  if (auto item = optional_slot(k, "item")) clauses.push_back("sitting " + *item);
  if (auto gadget = optional_slot(k, "gadget")) clauses.push_back("wearing " + *gadget);
  if (auto hat = optional_slot(k, "hat")) clauses.push_back("wearing a " + *hat);
  for (std::size_t i = 0; i < clauses.size(); ++i) text += (i == 0 ? " " : " and ") + clauses[i];
  return text;
}

std::string portrait_text(const Keywords& k) {
  return required(k, "figure") + " wearing a " + required(k, "hat") + " is " + required(k, "expressing");
}

std::string template_text(const Keywords& k) { return k.count("species") ? animal_text(k) : portrait_text(k); }

std::vector<PromptRecord> gen_animals() {
  std::vector<PromptRecord> out;
  out.reserve(3150);
  for (const auto& species : kSpecies) {
    for (const auto& item : kItems) {
      for (const auto& gadget : kGadgets) {
        for (const auto& hat : kHats) {
          PromptRecord r;
          r.id = std::int64_t(out.size());
          r.keywords = {{"species", species}, {"item", item}, {"gadget", gadget}, {"hat", hat}};
          r.text = animal_text(r.keywords);
          out.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

std::vector<PromptRecord> gen_portraits() {
  std::vector<PromptRecord> out;
  out.reserve(400);
  for (const auto& figure : kFigures) {
    for (const auto& hat : kPortraitHats) {
      for (const auto& expr : kExpressions) {
        PromptRecord r;
        r.id = std::int64_t(out.size());
        r.keywords = {{"figure", figure}, {"hat", hat}, {"expressing", expr}};
        r.text = portrait_text(r.keywords);
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::vector<PromptRecord> gen_desk_animals() {
  const std::set<std::string> species = {"panda", "fox", "rabbit", "wolf"};
  const std::set<std::optional<std::string>> hats = {std::nullopt, "beanie", "tophat", "straw hat"};
  const std::set<std::optional<std::string>> gadgets = {std::nullopt, "a scarf"};
  std::vector<PromptRecord> out;
  for (auto& r : gen_animals()) {
    const auto& k = r.keywords;
    if (species.count(*k.at("species")) && !k.at("item") && gadgets.count(k.at("gadget")) && hats.count(k.at("hat"))) {
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<PromptRecord> split(std::vector<PromptRecord> records, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split: train_frac must be in (0, 1)");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, "split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * double(records.size())));
  for (std::size_t i = 0; i < order.size(); ++i) records[order[i]].split = i < n_train ? Split::kTrain : Split::kTest;
  return records;
}

std::string to_jsonl(const std::vector<PromptRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    json kw = json::object();
    for (const auto& [slot, value] : r.keywords) kw[slot] = value ? json(*value) : json(nullptr);
    json line = {{"id", r.id}, {"text", r.text}, {"keywords", kw}, {"split", split_name(r.split)}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::vector<PromptRecord> from_jsonl(const std::string& text) {
  std::vector<PromptRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      PromptRecord r;
      r.id = j.at("id").get<std::int64_t>();
      r.text = j.at("text").get<std::string>();
      for (const auto& [slot, value] : j.at("keywords").items()) {
        r.keywords[slot] = value.is_null() ? std::nullopt : std::optional<std::string>(value.get<std::string>());
      }
      const auto s = j.at("split").get<std::string>();
      if (s != "train" && s != "test") throw std::invalid_argument("split must be train or test");
      r.split = s == "train" ? Split::kTrain : Split::kTest;
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("prompt file line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_prompts(const std::filesystem::path& path, const std::vector<PromptRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << to_jsonl(records);
}

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_jsonl(ss.str());
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

Tensord SyntheticEmbedder::token_embedding(const std::string& token) const {
  Rng rng = Rng::stream(seed, "token:" + token);
  Tensord e({dim});
  for (Index i = 0; i < dim; ++i) e[i] = rng.normal();
  e.array() /= std::sqrt(e.array().square().sum());
  return e;
}

TextCondition<double> SyntheticEmbedder::embed(const std::string& text) const {
  const auto toks = tokenize(text);
  if (toks.empty()) throw std::invalid_argument("embed: empty text");
  TextCondition<double> c{Tensord({tokens, dim}), Tensord({dim})};
  const Tensord pad = token_embedding("<pad>");
  const Index used = std::min<Index>(Index(toks.size()), tokens);
  for (Index t = 0; t < tokens; ++t) {
    const Tensord e = t < used ? token_embedding(toks[std::size_t(t)]) : pad;
    for (Index i = 0; i < dim; ++i) c.token_embeddings[t * dim + i] = e[i];
    if (t < used) c.sentence_embedding.array() += e.array();
  }
  c.sentence_embedding.array() /= std::sqrt(c.sentence_embedding.array().square().sum());
  return c;
}

Eigen::Vector3d body_color(const Keywords& k) {
  const std::string& key = k.count("species") ? required(k, "species") : required(k, "figure");
  auto it = kBodyColors.find(key);
  if (it == kBodyColors.end()) throw std::invalid_argument("target_scene: unknown keyword '" + key + "'");
  return it->second;
}

std::optional<Eigen::Vector3d> hat_color(const Keywords& k) {
  const auto hat = optional_slot(k, "hat");
  if (!hat) return std::nullopt;
  auto it = kHatColors.find(*hat);
  if (it == kHatColors.end()) throw std::invalid_argument("target_scene: unknown hat '" + *hat + "'");
  return it->second;
}

Tensord target_scene(const PromptRecord& record, const CameraPose& pose, Index height, Index width,
                     double background, const SceneGeometry& geo) {
  const Eigen::Vector3d body = body_color(record.keywords);
  const auto hat = hat_color(record.keywords);
  const Rays rays = generate_rays(pose, height, width);
  // Nearest positive hit of a unit-direction ray with a sphere, or +inf.
  auto hit = [&](const Eigen::Vector3d& d, const Eigen::Vector3d& c, double radius) {
    const Eigen::Vector3d oc = rays.origin - c;
    const double b = oc.dot(d);
    const double disc = b * b - (oc.squaredNorm() - radius * radius);
    if (disc < 0.0) return std::numeric_limits<double>::infinity();
    const double t = -b - std::sqrt(disc);
    return t > 0.0 ? t : std::numeric_limits<double>::infinity();
  };
  Tensord img = Tensord::full({height, width, 3}, background);
  for (Index i = 0; i < rays.count(); ++i) {
    const Eigen::Vector3d d = rays.directions.row(i);
    const double tb = hit(d, geo.body_center, geo.body_radius);
    const double th = hat ? hit(d, geo.hat_center, geo.hat_radius) : std::numeric_limits<double>::infinity();
    if (!std::isfinite(std::min(tb, th))) continue;
    const Eigen::Vector3d& c = th < tb ? *hat : body;
    for (int k = 0; k < 3; ++k) img[i * 3 + k] = c[k];
  }
  return img;
}

}  // namespace it3d
