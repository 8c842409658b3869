#include "bunet/unet.hpp"

#include <string>

#include "bunet/errors.hpp"

namespace bunet {

void UNetSpec::validate() const {
  if (in_channels != 1 && in_channels != 2) throw ConfigError("UNetSpec: in_channels must be 1 or 2");
  if (base_filters == 0) throw ConfigError("UNetSpec: base_filters must be positive");
  if (levels < 2 || levels > 8) throw ConfigError("UNetSpec: levels must lie in [2, 8]");
  if (kernel == 0 || final_kernel == 0) throw ConfigError("UNetSpec: kernel sizes must be positive");
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) throw ConfigError("UNetSpec: dropout_rate must lie in [0, 1)");
  if (out_channels != 1) throw ConfigError("UNetSpec: only a single output channel is supported");
}

Tensor ConvUnit::forward(const Tensor& x, BnMode mode) { return bn.forward(relu(conv.forward(x)), mode); }

namespace {

ConvUnit make_unit(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
  return ConvUnit{Conv2d(in, out, kernel, rng), BatchNorm2d(out)};
}

std::optional<Dropout> make_dropout(float rate, bool present) {
  if (!present) return std::nullopt;
  return Dropout(rate);
}

template <class Net, class Out>
void collect_unit(Net& unit, const std::string& prefix, bool with_running, Out& out) {
  out.push_back({prefix + ".conv.weight", unit.conv.weight()});
  out.push_back({prefix + ".conv.bias", unit.conv.bias()});
  out.push_back({prefix + ".bn.gamma", unit.bn.gamma()});
  out.push_back({prefix + ".bn.beta", unit.bn.beta()});
  if (with_running) {
    out.push_back({prefix + ".bn.running_mean", unit.bn.running_mean()});
    out.push_back({prefix + ".bn.running_var", unit.bn.running_var()});
  }
}

template <class Enc, class Dec, class Head>
std::vector<NamedTensor> collect(Enc& encoder, Dec& decoder, Head& head, bool with_running) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    collect_unit(encoder[i].first, p + ".0", with_running, out);
    collect_unit(encoder[i].second, p + ".1", with_running, out);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "dec" + std::to_string(i);
    collect_unit(decoder[i].up, p + ".up", with_running, out);
    collect_unit(decoder[i].first, p + ".0", with_running, out);
    collect_unit(decoder[i].second, p + ".1", with_running, out);
  }
  out.push_back({"head.weight", head.weight()});
  out.push_back({"head.bias", head.bias()});
  return out;
}

}  // namespace

UNet::UNet(const UNetSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.validate();
  Rng rng(seed);
  const std::size_t k = spec_.kernel;
  std::size_t in = spec_.in_channels;
  for (std::size_t level = 0; level < spec_.levels; ++level) {
    const std::size_t f = spec_.filters(level);
    encoder_.push_back(EncoderBlock{make_unit(in, f, k, rng), make_unit(f, f, k, rng),
                                    make_dropout(spec_.dropout_rate, true)});
    in = f;
  }
  for (std::size_t level = spec_.levels - 1; level-- > 0;) {
    const std::size_t f = spec_.filters(level);
    const bool last = level == 0;
    decoder_.push_back(DecoderBlock{make_unit(spec_.filters(level + 1), f, k, rng), make_unit(2 * f, f, k, rng),
                                    make_unit(f, f, k, rng), make_dropout(spec_.dropout_rate, !last)});
  }
  head_ = Conv2d(spec_.filters(0), spec_.out_channels, spec_.final_kernel, rng);
}

Tensor UNet::logits(const Tensor& x, ForwardOptions options, Rng& rng) {
  if (!x.defined() || x.dim() != 4) throw ShapeError("UNet: expected [b, c, h, w] input");
  if (x.size(1) != spec_.in_channels) {
    throw ShapeError("UNet: input has " + std::to_string(x.size(1)) + " channels, network expects " +
                     std::to_string(spec_.in_channels));
  }
  const std::size_t m = spec_.size_multiple();
  if (x.size(2) % m != 0 || x.size(3) % m != 0) {
    throw ShapeError("UNet: spatial dims " + shape_to_string(x.shape()) + " must be multiples of " + std::to_string(m));
  }

  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    auto& block = encoder_[i];
    h = block.second.forward(block.first.forward(h, options.bn), options.bn);
    if (block.dropout) h = block.dropout->forward(h, options.dropout, rng);
    if (i + 1 < encoder_.size()) {
      skips.push_back(h);
      h = maxpool2x2(h);
    }
  }
  for (auto& block : decoder_) {
    h = block.up.forward(upsample2x_nearest(h), options.bn);
    h = concat_channels(skips.back(), h);
    skips.pop_back();
    h = block.second.forward(block.first.forward(h, options.bn), options.bn);
    if (block.dropout) h = block.dropout->forward(h, options.dropout, rng);
  }
  return head_.forward(h);
}

Tensor UNet::forward(const Tensor& x, ForwardOptions options, Rng& rng) { return sigmoid(logits(x, options, rng)); }

std::vector<NamedTensor> UNet::parameters() { return collect(encoder_, decoder_, head_, false); }
std::vector<NamedTensor> UNet::state() { return collect(encoder_, decoder_, head_, true); }
std::vector<NamedTensor> UNet::state() const { return collect(encoder_, decoder_, head_, true); }

std::size_t UNet::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : collect(encoder_, decoder_, head_, false)) total += t.numel();
  return total;
}

std::size_t UNet::dropout_layer_count() const {
  std::size_t n = 0;
  for (const auto& b : encoder_) n += b.dropout.has_value();
  for (const auto& b : decoder_) n += b.dropout.has_value();
  return n;
}

std::vector<std::vector<float>> UNet::snapshot() const {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : state()) out.push_back(t.to_vector());
  return out;
}

void UNet::restore(const std::vector<std::vector<float>>& values) {
  auto st = state();
  if (values.size() != st.size()) throw ContractError("UNet::restore: snapshot has wrong tensor count");
  for (std::size_t i = 0; i < st.size(); ++i) {
    auto dst = st[i].tensor.mutable_data();
    if (values[i].size() != dst.size()) throw ContractError("UNet::restore: size mismatch for " + st[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace bunet
