// Manifest layout, one record per line:
//   marmo-unet 1
//   in_channels / depth / base_features / batch_norm / dropout / input_extent / input_scale / seed <value>
//   layers <count>
//   layer <i> <kind> <in> <out> <n_weights> <n_bias>
// The blob holds, per layer in order: weights, bias, and for batch-norm layers
// running_mean then running_var, all as little-endian f32.
#include <bit>
#include <fstream>
#include <sstream>

#include "marmo/nnseg.hpp"
#include "marmo/textio.hpp"

namespace marmo {

namespace fs = std::filesystem;

namespace {

fs::path with_ext(const fs::path& prefix, const char* ext) {
  fs::path p = prefix;
  p += ext;
  return p;
}

void put_f32(std::ofstream& out, const std::vector<double>& v) {
  for (double d : v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(d));
    const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                       static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    out.write(b, 4);
  }
}

void get_f32(std::ifstream& in, std::vector<double>& v, const fs::path& p) {
  for (double& d : v) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(p.string() + ": truncated weight blob");
    const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    d = static_cast<double>(std::bit_cast<float>(bits));
  }
}

}  // namespace

void save_model(const NetworkParams& p, const fs::path& prefix) {
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  std::ofstream man(with_ext(prefix, ".model"));
  if (!man) throw Error("cannot write " + with_ext(prefix, ".model").string());
  const auto& c = p.config;
  man << "marmo-unet 1\n"
      << "in_channels " << c.in_channels << "\n"
      << "depth " << c.depth << "\n"
      << "base_features " << c.base_features << "\n"
      << "batch_norm " << (c.batch_norm ? 1 : 0) << "\n"
      << "dropout " << format_double(c.dropout) << "\n"
      << "input_extent " << c.input_extent << "\n"
      << "input_scale " << format_double(c.input_scale) << "\n"
      << "seed " << p.seed << "\n"
      << "layers " << p.layers.size() << "\n";
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const Layer& L = p.layers[i];
    man << "layer " << i << ' ' << layer_kind_name(L.kind) << ' ' << L.in_channels << ' ' << L.out_channels << ' '
        << L.weights.size() << ' ' << L.bias.size() << "\n";
  }
  std::ofstream blob(with_ext(prefix, ".bin"), std::ios::binary);
  if (!blob) throw Error("cannot write " + with_ext(prefix, ".bin").string());
  for (const Layer& L : p.layers) {
    put_f32(blob, L.weights);
    put_f32(blob, L.bias);
    if (L.kind == LayerKind::BatchNorm) {
      put_f32(blob, L.running_mean);
      put_f32(blob, L.running_var);
    }
  }
  if (!man || !blob) throw Error("write failed for model " + prefix.string());
}

NetworkParams load_model(const fs::path& prefix_in) {
  fs::path prefix = prefix_in;
  if (prefix.extension() == ".model" || prefix.extension() == ".bin") prefix.replace_extension();
  const fs::path mpath = with_ext(prefix, ".model");
  std::ifstream man(mpath);
  if (!man) throw FormatError("cannot open model manifest " + mpath.string());

  UNetConfig c;
  std::uint64_t seed = 0;
  std::size_t n_layers = 0;
  std::vector<std::vector<std::string>> layer_lines;
  std::string line;
  bool header = false;
  while (std::getline(man, line)) {
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0][0] == '#') continue;
    auto value = [&]() -> const std::string& {
      if (tok.size() != 2) throw FormatError(mpath.string() + ": malformed line '" + line + "'");
      return tok[1];
    };
    if (tok[0] == "marmo-unet") {
      if (value() != "1") throw FormatError(mpath.string() + ": unsupported manifest version " + tok[1]);
      header = true;
    } else if (tok[0] == "in_channels") c.in_channels = static_cast<int>(parse_int(value()));
    else if (tok[0] == "depth") c.depth = static_cast<int>(parse_int(value()));
    else if (tok[0] == "base_features") c.base_features = static_cast<int>(parse_int(value()));
    else if (tok[0] == "batch_norm") c.batch_norm = parse_int(value()) != 0;
    else if (tok[0] == "dropout") c.dropout = parse_double(value());
    else if (tok[0] == "input_extent") c.input_extent = static_cast<int>(parse_int(value()));
    else if (tok[0] == "input_scale") c.input_scale = parse_double(value());
    else if (tok[0] == "seed") seed = static_cast<std::uint64_t>(std::stoull(value()));
    else if (tok[0] == "layers") n_layers = static_cast<std::size_t>(parse_int(value()));
    else if (tok[0] == "layer") layer_lines.push_back(tok);
    else throw FormatError(mpath.string() + ": unknown key '" + tok[0] + "'");
  }
  if (!header) throw FormatError(mpath.string() + ": missing 'marmo-unet' header");

  NetworkParams p = make_unet(c, seed);
  if (p.layers.size() != n_layers || layer_lines.size() != n_layers) {
    throw FormatError(mpath.string() + ": layer count does not match the configuration");
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& t = layer_lines[i];
    const Layer& L = p.layers[i];
    const bool ok = t.size() == 7 && parse_int(t[1]) == static_cast<long>(i) && t[2] == layer_kind_name(L.kind) &&
                    parse_int(t[3]) == L.in_channels && parse_int(t[4]) == L.out_channels &&
                    parse_int(t[5]) == static_cast<long>(L.weights.size()) &&
                    parse_int(t[6]) == static_cast<long>(L.bias.size());
    if (!ok) throw FormatError(mpath.string() + ": layer " + std::to_string(i) + " does not match the configuration");
  }

  const fs::path bpath = with_ext(prefix, ".bin");
  std::ifstream blob(bpath, std::ios::binary);
  if (!blob) throw FormatError("cannot open model weights " + bpath.string());
  for (Layer& L : p.layers) {
    get_f32(blob, L.weights, bpath);
    get_f32(blob, L.bias, bpath);
    if (L.kind == LayerKind::BatchNorm) {
      get_f32(blob, L.running_mean, bpath);
      get_f32(blob, L.running_var, bpath);
    }
  }
  if (blob.peek() != std::char_traits<char>::eof()) throw FormatError(bpath.string() + ": trailing bytes");
  return p;
}

}  // namespace marmo
