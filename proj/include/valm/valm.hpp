#pragma once

#include "valm/augment.hpp"
#include "valm/cli.hpp"
#include "valm/common.hpp"
#include "valm/corpus.hpp"
#include "valm/encoder.hpp"
#include "valm/evalkit.hpp"
#include "valm/fusion_lm.hpp"
#include "valm/io.hpp"
#include "valm/tokenizer.hpp"
#include "valm/trainer.hpp"
#include "valm/vindex.hpp"
