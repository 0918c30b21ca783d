#pragma once
// Umbrella header.

#include "mfnet/attention.hpp"
#include "mfnet/augment.hpp"
#include "mfnet/checkpoint.hpp"
#include "mfnet/config.hpp"
#include "mfnet/dataset.hpp"
#include "mfnet/episodes.hpp"
#include "mfnet/evaluate.hpp"
#include "mfnet/features.hpp"
#include "mfnet/image_io.hpp"
#include "mfnet/losses.hpp"
#include "mfnet/metrics.hpp"
#include "mfnet/network.hpp"
#include "mfnet/report.hpp"
#include "mfnet/synth.hpp"
#include "mfnet/trainer.hpp"
