"""Cross-attention transformer decoder with class queries and the
structure-affinity transformation that re-weights image tokens by
confidence-mixed class affinities.
"""

import math

import torch
import torch.nn as nn


def sincos_position_encoding(dim, h, w, temperature=10000.0, dtype=torch.float32, device=None):
    """Fixed 2D sine/cosine positional encoding of shape (h * w, dim).

    A quarter of the channels each carry sin/cos of the row coordinate and
    sin/cos of the column coordinate; dim must be divisible by 4.
    """
    if dim % 4 != 0:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / temperature ** (torch.arange(quarter, dtype=dtype, device=device) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    ys = ys.reshape(-1, 1) * omega
    xs = xs.reshape(-1, 1) * omega
    return torch.cat([ys.sin(), ys.cos(), xs.sin(), xs.cos()], dim=1)


class QuerySelfAttention(nn.Module):
    """Multi-head self-attention over the class queries."""

    def __init__(self, dim, heads=1):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q):
        b, n, d = q.shape
        split = lambda t: t.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        qh, kh, vh = split(self.q_proj(q)), split(self.k_proj(q)), split(self.v_proj(q))
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class DecoderBlock(nn.Module):
    """One decoder layer: query self-attention, then bidirectional
    cross-attention between class queries and image tokens.

    Keys and values come from two separate linear maps of the incoming
    tokens. The query-to-token logits are used twice: softmaxed over
    tokens they gather content into each query (residual update), and
    softmaxed over queries they redistribute the gathered content back
    onto the tokens, so a token's update is the query-mixture of what the
    queries just read. With all logits equal both softmaxes are uniform
    and every token simply gains the mean value row.
    """

    def __init__(self, dim, heads=1):
        super().__init__()
        self.self_attn = QuerySelfAttention(dim, heads)
        self.key_proj = nn.Linear(dim, dim)
        self.value_proj = nn.Linear(dim, dim)

    def _cross(self, queries, tokens):
        k = self.key_proj(tokens)
        v = self.value_proj(tokens)
        logits = queries @ k.transpose(1, 2)  # (B, N, T)
        over_tokens = torch.softmax(logits, dim=2)
        over_queries = torch.softmax(logits, dim=1)
        gathered = over_tokens @ v  # (B, N, D) content pulled per query
        return over_tokens, over_queries, gathered

    def cross_attention(self, queries, tokens):
        """Token-normalized cross-attention rows (B, N, T), post self-attention."""
        queries = queries + self.self_attn(queries)
        over_tokens, _, _ = self._cross(queries, tokens)
        return over_tokens

    def forward(self, queries, tokens):
        """(B, N, D) queries and (B, T, D) tokens -> updated (queries, tokens)."""
        if queries.shape[-1] != tokens.shape[-1]:
            raise ValueError(
                f"query width {queries.shape[-1]} != token width {tokens.shape[-1]}"
            )
        queries = queries + self.self_attn(queries)
        _, over_queries, gathered = self._cross(queries, tokens)
        q_out = queries + gathered
        t_out = tokens + torch.einsum("bnt,bnd->btd", over_queries, gathered)
        return q_out, t_out


class TransformerDecoder(nn.Module):
    """Stack of decoder blocks with independent weights.

    forward returns the token features and class-query features after every
    layer, newest last, so downstream consumers can tap any depth.
    """

    def __init__(self, dim, layers=6, heads=1):
        super().__init__()
        if layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads) for _ in range(layers))

    def forward(self, queries, tokens):
        token_stages, query_stages = [], []
        for block in self.blocks:
            queries, tokens = block(queries, tokens)
            query_stages.append(queries)
            token_stages.append(tokens)
        return token_stages, query_stages


class MaskHead(nn.Module):
    """3-layer perceptron turning final class-query features into class mask
    vectors, one per category."""

    def __init__(self, dim, mask_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, mask_dim)

    def forward(self, class_features):
        h = torch.relu(self.fc1(class_features))
        h = torch.relu(self.fc2(h))
        return self.fc3(h)


def class_confidence(masks, tokens):
    """Per-token class membership confidence, softmax-normalized over classes.

    masks: (B, N, D) class mask vectors; tokens: (B, T, D).
    Returns (B, N, T) with each token's N scores summing to 1.
    """
    if masks.shape[-1] != tokens.shape[-1]:
        raise ValueError(
            f"mask width {masks.shape[-1]} != token width {tokens.shape[-1]}"
        )
    scores = torch.einsum("bnd,btd->bnt", masks, tokens)
    return torch.softmax(scores, dim=1)


class AffinityGenerator(nn.Module):
    """Produces one token-by-token affinity matrix per class.

    A small MLP maps each class feature to a D x D projection; the affinity
    between tokens t and s for class n is the projected-query dot product
    (P_n f_t) . f_s scaled by 1/D. Zeroing the MLP's output layer therefore
    zeroes every affinity matrix.
    """

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim * dim)

    def forward(self, class_features, tokens):
        """(B, N, D) class features and (B, T, D) tokens -> (B, N, T, T)."""
        b, n, d = class_features.shape
        proj = self.fc2(torch.relu(self.fc1(class_features))).view(b, n, d, d)
        projected = torch.einsum("btd,bnkd->bntk", tokens, proj)
        return torch.einsum("bntk,bsk->bnts", projected, tokens) / d


def structure_affinity_transform(tokens, affinities, confidence):
    """Mix class affinities by per-token confidence and apply them to tokens.

    tokens: (B, T, D); affinities: (B, N, T, T); confidence: (B, N, T).
    The combined operator A[t, s] = sum_n confidence[n, t] * affinities[n, t, s]
    is applied as tokens_out = A @ tokens. One-hot confidence on class n
    reduces A to that class's affinity exactly.
    """
    b, t, d = tokens.shape
    if affinities.shape[-2:] != (t, t):
        raise ValueError(
            f"affinity operator {tuple(affinities.shape)} does not act on {t} tokens"
        )
    if confidence.shape != affinities.shape[:3]:
        raise ValueError(
            f"confidence shape {tuple(confidence.shape)} does not match affinities"
        )
    combined = torch.einsum("bnt,bnts->bts", confidence, affinities)
    return torch.bmm(combined, tokens)


class StructureAwareModule(nn.Module):
    """Decoder-plus-affinity head producing structure-aware features and
    class mask vectors from an attention-enhanced feature map.

    The input map is flattened to tokens (with fixed sine/cosine positional
    encodings), refined jointly with N learnable class queries through the
    decoder stack, and the final token map is re-weighted by the
    confidence-mixed class affinities before being reshaped back to
    (B, C, H, W).
    """

    def __init__(self, dim, num_classes=4, layers=6, heads=1, mask_dim=None, residual=False):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.residual = residual
        self.class_queries = nn.Parameter(torch.randn(num_classes, dim) * 0.02)
        self.decoder = TransformerDecoder(dim, layers=layers, heads=heads)
        self.mask_head = MaskHead(dim, mask_dim or dim)
        self.affinity = AffinityGenerator(dim)

    def forward(self, feature_map):
        if feature_map.dim() != 4:
            raise ValueError("expected a (B, C, H, W) feature map")
        b, c, h, w = feature_map.shape
        if c != self.dim:
            raise ValueError(f"feature map carries {c} channels, module expects {self.dim}")
        tokens = feature_map.flatten(2).transpose(1, 2)
        tokens = tokens + sincos_position_encoding(
            self.dim, h, w, dtype=tokens.dtype, device=tokens.device
        )
        queries = self.class_queries.unsqueeze(0).expand(b, -1, -1)
        token_stages, query_stages = self.decoder(queries, tokens)
        final_tokens, final_queries = token_stages[-1], query_stages[-1]
        masks = self.mask_head(final_queries)
        confidence = class_confidence(masks, final_tokens)
        affinities = self.affinity(final_queries, final_tokens)
        transformed = structure_affinity_transform(final_tokens, affinities, confidence)
        if self.residual:
            transformed = transformed + final_tokens
        structure_map = transformed.transpose(1, 2).view(b, c, h, w)
        return structure_map, masks
