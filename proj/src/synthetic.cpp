#include "attnatlas/synthetic.hpp"

#include <random>

namespace attnatlas {

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

// Rounds through float so fixtures survive the 32-bit interchange unchanged.
void to_f32(Matrix& m) {
  m = m.cast<float>().cast<double>();
}

}  // namespace

const std::vector<std::string>& fixture_vocabulary() {
  static const std::vector<std::string> words = {"the", "cat", "sat", "on",  "mat", "a",    "dog",
                                                 "ran", "to",  "there", "then", "that", "this", "is"};
  return words;
}

std::vector<TokenRecord> plain_tokens(const std::vector<int>& lengths) {
  std::vector<TokenRecord> tokens;
  for (Role role : {Role::query, Role::key}) {
    for (std::size_t s = 0; s < lengths.size(); ++s) {
      for (int p = 0; p < lengths[s]; ++p) {
        TokenRecord t;
        t.token_id = static_cast<int>(tokens.size());
        t.sequence_id = static_cast<int>(s);
        t.position = p;
        t.role = role;
        t.display_text = "w" + std::to_string(p);
        tokens.push_back(std::move(t));
      }
    }
  }
  return tokens;
}

HeadTensors gaussian_head(const std::vector<int>& lengths, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HeadTensors h;
  h.tokens = plain_tokens(lengths);
  const auto n = static_cast<Eigen::Index>(h.tokens.size() / 2);
  h.queries = gaussian(n, d, rng);
  h.keys = gaussian(n, d, rng);
  assign_prescale_norms(h);
  return h;
}

HeadTensors ideal_head(const std::vector<int>& lengths, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  HeadTensors h;
  h.tokens = plain_tokens(lengths);
  const auto n = static_cast<Eigen::Index>(h.tokens.size() / 2);
  auto unit_pairs = [&] {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < n; i += 2) {
      RowVector u = gaussian(1, d, rng).row(0);
      u.normalize();
      m.row(i) = u;
      if (i + 1 < n) m.row(i + 1) = -u;
    }
    return m;
  };
  if (n % 2 != 0) throw Error("ideal_head: total length must be even");
  h.queries = unit_pairs();
  h.keys = unit_pairs();
  assign_prescale_norms(h);
  return h;
}

ExportBundle make_fixture_bundle(const FixtureSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  ExportBundle b;
  b.model.model_id = spec.model_id;
  b.model.modality = spec.modality;
  b.model.attention_direction = spec.direction;
  b.model.num_layers = spec.num_layers;
  b.model.heads_per_layer = spec.heads_per_layer;
  b.model.head_dim = spec.head_dim;
  b.dataset = spec.dataset;
  b.exporter = {{"max_length", 64}, {"dedup", false}, {"generator", "fixture"}, {"seed", spec.seed}};

  const auto& vocab = fixture_vocabulary();
  const bool image = spec.modality == Modality::image;
  std::uniform_int_distribution<int> len_dist(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> word(0, vocab.size() - 1);
  std::uniform_int_distribution<int> byte(0, 255);

  // one template token per (sequence, position); both roles share it
  std::vector<TokenRecord> proto;
  std::vector<Eigen::Index> word_index;
  for (int s = 0; s < spec.num_sequences; ++s) {
    const int len = image ? spec.image_grid * spec.image_grid + 1 : len_dist(rng);
    SequenceInfo info{s, len, "", std::nullopt};
    if (image) info.image = "image_" + std::to_string(s) + ".png";
    for (int p = 0; p < len; ++p) {
      TokenRecord t;
      t.sequence_id = s;
      t.position = p;
      std::size_t w = word(rng);
      if (image) {
        if (p == 0) {
          t.display_text = "[CLS]";
          t.is_special = true;
        } else {
          t.row = (p - 1) / spec.image_grid;
          t.col = (p - 1) % spec.image_grid;
          t.display_text = "patch " + std::to_string(*t.row) + "," + std::to_string(*t.col);
          t.patch_rgb = std::array<std::uint8_t, 3>{static_cast<std::uint8_t>(byte(rng)),
                                                    static_cast<std::uint8_t>(byte(rng)),
                                                    static_cast<std::uint8_t>(byte(rng))};
          t.semantic_label = (*t.row < spec.image_grid / 2) ? "sky" : "ground";
        }
      } else if (spec.direction == AttentionDirection::bidirectional && (p == 0 || p == len - 1)) {
        t.display_text = p == 0 ? "[CLS]" : "[SEP]";
        t.is_special = true;
      } else {
        t.display_text = vocab[w];
        if (!info.text.empty()) info.text += ' ';
        info.text += vocab[w];
      }
      proto.push_back(t);
      word_index.push_back(static_cast<Eigen::Index>(t.is_special ? vocab.size() : w));
    }
    b.sequences.push_back(std::move(info));
  }

  std::vector<TokenRecord> tokens;
  for (Role role : {Role::query, Role::key})
    for (auto t : proto) {
      t.role = role;
      t.token_id = static_cast<int>(tokens.size());
      tokens.push_back(std::move(t));
    }

  // token embeddings: a word vector plus a position vector
  const int width = 2 * spec.head_dim;
  const Matrix word_emb = gaussian(static_cast<Eigen::Index>(vocab.size()) + 1, width, rng);
  const Matrix pos_emb = gaussian(64 + spec.image_grid * spec.image_grid + 1, width, rng, 0.5);
  const auto n = static_cast<Eigen::Index>(proto.size());
  Matrix x(n, width);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = word_emb.row(word_index[i]) + pos_emb.row(proto[i].position);

  for (int l = 0; l < spec.num_layers; ++l) {
    for (int hd = 0; hd < spec.heads_per_layer; ++hd) {
      HeadTensors h;
      h.layer = l;
      h.head = hd;
      Matrix wq = gaussian(spec.head_dim, width, rng, 1.0 / std::sqrt(width));
      Matrix wk = gaussian(spec.head_dim, width, rng, 1.0 / std::sqrt(width));
      to_f32(wq);
      to_f32(wk);
      h.queries = spec.query_scale * (x * wq.transpose());
      h.keys = (x * wk.transpose()).array() + spec.key_offset;
      to_f32(h.queries);
      to_f32(h.keys);
      if (spec.with_weights) {
        h.wq = wq;
        h.wk = wk;
      }
      h.tokens = tokens;
      assign_prescale_norms(h);
      b.heads.push_back(std::move(h));
    }
  }
  return b;
}

}  // namespace attnatlas
