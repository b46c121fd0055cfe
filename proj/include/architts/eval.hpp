#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <vector>

#include "architts/codec.hpp"
#include "architts/dataset.hpp"
#include "architts/model.hpp"
#include "architts/sampler.hpp"

// Evaluation over a held-out split. Each utterance is synthesized zero-shot
// from a prompt by the same speaker (the speaker's next utterance in corpus
// order), then scored by token error rate against its own transcription and
// by cosine similarity to its speaker vector.

namespace architts {

struct SplitEvaluation {
    int64_t utterances = 0;
    double mean_token_error_rate = 0;
    double mean_speaker_cosine = 0;
    int64_t encoder_evals = 0;
    int64_t decoder_evals = 0;
    double wall_time_s = 0;
};

// Prompt index for every utterance: the next one of the same speaker,
// wrapping around; a speaker's sole utterance prompts itself.
inline std::vector<size_t> prompt_assignment(const Corpus& split) {
    std::map<int64_t, std::vector<size_t>> by_speaker;
    for (size_t i = 0; i < split.utterances.size(); ++i)
        by_speaker[split.utterances[i].speaker].push_back(i);
    std::vector<size_t> prompt(split.utterances.size());
    for (const auto& [speaker, members] : by_speaker)
        for (size_t k = 0; k < members.size(); ++k)
            prompt[members[k]] = members[(k + 1) % members.size()];
    return prompt;
}

inline SplitEvaluation evaluate_split(ArchiTtsModel<float>& model, const LatentCodec& codec,
                                      const Corpus& split, const SamplerPlan& plan,
                                      int64_t limit = 0) {
    if (split.utterances.empty()) throw ValidationError("evaluate_split: empty split");
    const int64_t d_lat = codec.config().latent_dim;
    const auto prompts = prompt_assignment(split);
    const size_t count = limit > 0
                             ? std::min(split.utterances.size(), static_cast<size_t>(limit))
                             : split.utterances.size();

    SplitEvaluation ev;
    RootRng root(plan.seed);
    const auto start = std::chrono::steady_clock::now();
    for (size_t i = 0; i < count; ++i) {
        const Utterance& target = split.utterances[i];
        const Utterance& prompt = split.utterances[prompts[i]];
        const int64_t t_ref = prompt.frame_count(d_lat);
        Tensor<float> ref_latents =
            Tensor<float>::from_data({t_ref, d_lat}, std::vector<float>(prompt.frames.begin(),
                                                                        prompt.frames.end()));
        auto spk = codec.estimate_speaker(prompt.frames);
        Tensor<float> speaker =
            Tensor<float>::from_data({codec.config().speaker_dim},
                                     std::vector<float>(spk.begin(), spk.end()));

        SamplerPlan item_plan = plan;
        item_plan.seed = root.stream_seed("synth", target.id);
        auto out = zero_shot_synthesize(model, codec, ref_latents, prompt.tokens, target.tokens,
                                        speaker, item_plan);
        ev.mean_token_error_rate += token_error_rate(target.tokens, out.decoded_tokens);
        ev.mean_speaker_cosine += codec.speaker_similarity(out.latents.data(), target.speaker);
        ev.encoder_evals += out.encoder_evals;
        ev.decoder_evals += out.decoder_evals;
        ++ev.utterances;
    }
    const auto end = std::chrono::steady_clock::now();
    ev.wall_time_s = std::chrono::duration<double>(end - start).count();
    ev.mean_token_error_rate /= static_cast<double>(ev.utterances);
    ev.mean_speaker_cosine /= static_cast<double>(ev.utterances);
    return ev;
}

}  // namespace architts
