#pragma once

// Umbrella header for the zero-shot classifier-prediction engine.

#include "zeroshot/attributes.hpp"
#include "zeroshot/dataset.hpp"
#include "zeroshot/errors.hpp"
#include "zeroshot/evaluation.hpp"
#include "zeroshot/gradcheck.hpp"
#include "zeroshot/losses.hpp"
#include "zeroshot/model.hpp"
#include "zeroshot/optimizer.hpp"
#include "zeroshot/rng.hpp"
#include "zeroshot/tape.hpp"
#include "zeroshot/tensor.hpp"
#include "zeroshot/text_features.hpp"
#include "zeroshot/training.hpp"
